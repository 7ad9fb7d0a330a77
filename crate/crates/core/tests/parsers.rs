//! Decoders return errors, never panic, on arbitrary text (the fuzz targets' property).

use proptest::prelude::*;
use sparsedom::format::{read_grid_csv, read_shift, read_zonotope_csv, write_grid_csv, write_shift};
use sparsedom::harness::RunConfig;
use sparsedom::shift::{random_shift, RandomShiftSpec};
use sparsedom::GridFunction;

fn mutate(text: &str, pos: usize, byte: u8) -> String {
    let mut b = text.as_bytes().to_vec();
    if !b.is_empty() {
        let p = pos % b.len();
        b[p] = byte;
    }
    String::from_utf8_lossy(&b).into_owned()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn arbitrary_text_never_panics(s in ".{0,200}") {
        let _ = read_grid_csv(&s);
        let _ = read_shift(&s);
        let _ = read_zonotope_csv(&s);
        let _ = RunConfig::from_json(&s);
    }

    #[test]
    fn mutated_grid_files_never_panic(seed in any::<u64>(), pos in any::<usize>(), byte in any::<u8>()) {
        let vals: Vec<f64> = (0..16).map(|i| (seed.rotate_left(i) % 1000) as f64 / 7.0).collect();
        let text = write_grid_csv(&GridFunction::scalar(2, 2, vals).unwrap());
        let _ = read_grid_csv(&mutate(&text, pos, byte));
    }

    #[test]
    fn mutated_shift_files_never_panic(seed in any::<u64>(), pos in any::<usize>(), byte in any::<u8>()) {
        let s = random_shift(seed, &RandomShiftSpec::new(1, 4, 2, 0.5)).unwrap();
        let _ = read_shift(&mutate(&write_shift(&s), pos, byte));
    }

    #[test]
    fn mutated_configs_never_panic(pos in any::<usize>(), byte in any::<u8>()) {
        let text = RunConfig::quick().to_json();
        let _ = RunConfig::from_json(&mutate(&text, pos, byte));
    }
}

#[test]
fn hostile_headers_are_rejected() {
    assert!(read_grid_csv("d,n,L\n1,1,63\n").is_err());
    assert!(read_grid_csv("d,n,L\n9,1,2\n").is_err());
    assert!(read_grid_csv("d,n,L\n1,0,2\n").is_err());
    assert!(read_shift("shift 1 60 60 60 60 none 1 1\n").is_err());
    assert!(read_shift("shift 1 4 1 1 1 exact-small 1 1\nkernel 0 0 1e400 0 0 0\n").is_err());
    assert!(read_zonotope_csv("1,2,3,4\n").is_err());
}

#[test]
fn fuzz_corpus_seeds_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let mut seen = 0;
    for (dir, check) in [
        ("grid_csv", (|t: &str| read_grid_csv(t).map(|f| read_grid_csv(&write_grid_csv(&f)).unwrap() == f)) as fn(&str) -> sparsedom::Result<bool>),
        ("shift_file", |t| read_shift(t).map(|s| write_shift(&read_shift(&write_shift(&s)).unwrap()) == write_shift(&s))),
        ("zonotope_csv", |t| read_zonotope_csv(t).map(|_| true)),
        ("config_json", |t| RunConfig::from_json(t).map(|_| true)),
    ] {
        for entry in std::fs::read_dir(root.join(dir)).unwrap() {
            let path = entry.unwrap().path();
            let text = std::fs::read_to_string(&path).unwrap();
            assert!(check(&text).unwrap(), "{}", path.display());
            seen += 1;
        }
    }
    assert!(seen >= 8);
}
