#![no_main]

use libfuzzer_sys::fuzz_target;
use sparsedom::format::{read_grid_csv, write_grid_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(f) = read_grid_csv(text) {
        let again = read_grid_csv(&write_grid_csv(&f)).expect("written grids parse");
        assert_eq!(again, f);
    }
});
