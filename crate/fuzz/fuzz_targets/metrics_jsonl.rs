#![no_main]

use cotrain::trainer::parse_metrics_jsonl;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(recs) = parse_metrics_jsonl(text) {
        for r in &recs {
            let _ = r.csv_row();
        }
    }
});
