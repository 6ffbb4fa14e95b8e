fn main() {
    std::process::exit(cotrain::evalharness::cli_main(std::env::args_os()));
}
