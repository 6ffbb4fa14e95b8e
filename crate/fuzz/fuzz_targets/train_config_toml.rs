#![no_main]

use cotrain::trainer::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::from_toml(text) {
        let _ = cfg.validate();
        if let Ok(out) = cfg.to_toml() {
            let _ = TrainConfig::from_toml(&out);
        }
    }
});
