#![no_main]

use cotrain::banks::BenchmarkDoc;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(doc) = BenchmarkDoc::from_toml(text) {
        let again = BenchmarkDoc::from_toml(&doc.to_toml().expect("serializes")).expect("round trips");
        assert_eq!(again, doc);
    }
});
