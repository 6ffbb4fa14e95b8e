#![no_main]

use cotrain::evalharness::GridConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(grid) = GridConfig::from_toml(text) {
        let _ = grid.validate();
        let _ = grid.epsilon();
    }
});
