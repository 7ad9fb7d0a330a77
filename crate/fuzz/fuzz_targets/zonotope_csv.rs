#![no_main]

use libfuzzer_sys::fuzz_target;
use sparsedom::format::{read_zonotope_csv, write_zonotope_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(z) = read_zonotope_csv(text) {
        let again = read_zonotope_csv(&write_zonotope_csv(&z)).expect("written bodies parse");
        assert_eq!(again, z);
    }
});
