#![no_main]

use cotrain::evalharness::{export_report, GridResult};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(grid) = serde_json::from_slice::<GridResult>(data) {
        let dir = std::env::temp_dir().join("cotrain-fuzz-export");
        let _ = export_report(&grid, &dir);
    }
});
