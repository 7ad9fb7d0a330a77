#![no_main]

use libfuzzer_sys::fuzz_target;
use sparsedom::format::{read_shift, write_shift};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = read_shift(text) {
        let written = write_shift(&s);
        let again = read_shift(&written).expect("written shifts parse");
        assert_eq!(write_shift(&again), written);
    }
});
