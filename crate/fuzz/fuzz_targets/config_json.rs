#![no_main]

use libfuzzer_sys::fuzz_target;
use sparsedom::harness::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = RunConfig::from_json(text) {
        let again = RunConfig::from_json(&c.to_json()).expect("written configs parse");
        assert_eq!(again.to_json(), c.to_json());
    }
});
