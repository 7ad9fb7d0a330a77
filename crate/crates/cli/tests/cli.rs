use std::path::Path;
use std::process::{Command, Output};

fn sparsedom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsedom")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn samples(dir: &Path) {
    let out = path(dir);
    assert_eq!(code(&sparsedom(&["--out", out, "--seed", "3", "sample", "--name", "f1.csv"])), 0);
    assert_eq!(
        code(&sparsedom(&["--out", out, "--seed", "4", "sample", "--name", "f2.csv", "--kind", "random-signs"])),
        0
    );
}

#[test]
fn sparse_build_writes_collection() {
    let dir = tempfile::tempdir().unwrap();
    samples(dir.path());
    let out = dir.path().join("s");
    let o = sparsedom(&[
        "--out",
        path(&out),
        "sparse",
        "build",
        "--input",
        path(&dir.path().join("f1.csv")),
        "--input2",
        path(&dir.path().join("f2.csv")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let csv = std::fs::read_to_string(out.join("collection.csv")).unwrap();
    assert!(csv.starts_with("depth,index0,witness_measure,layer\n"));
    assert!(out.join("sparsity.json").exists());
}

#[test]
fn failing_verdict_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    samples(dir.path());
    let o = sparsedom(&[
        "--out",
        path(&dir.path().join("s")),
        "sparse",
        "build",
        "--input",
        path(&dir.path().join("f1.csv")),
        "--input2",
        path(&dir.path().join("f2.csv")),
        "--eta",
        "0.9",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let body = dir.path().join("bad.csv");
    std::fs::write(&body, "1,x\n").unwrap();
    let o = sparsedom(&["--out", path(dir.path()), "convex", "john", "--body", path(&body)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn shift_file_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = sparsedom(&["--out", path(&a), "--seed", "9", "shift", "--rho", "3", "--cancellative"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = sparsedom(&["--out", path(&b), "shift", "--shift-file", path(&a.join("shift.txt"))]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("round trip bit-exact"));
    assert_eq!(std::fs::read(a.join("shift.txt")).unwrap(), std::fs::read(b.join("shift.txt")).unwrap());
}

#[test]
fn czd_with_shift_passes() {
    let dir = tempfile::tempdir().unwrap();
    samples(dir.path());
    let s = dir.path().join("s");
    assert_eq!(code(&sparsedom(&["--out", path(&s), "--seed", "2", "shift", "--finest", "10"])), 0);
    let o = sparsedom(&[
        "--out",
        path(&dir.path().join("c")),
        "czd",
        "--input",
        path(&dir.path().join("f1.csv")),
        "--input2",
        path(&dir.path().join("f2.csv")),
        "--shift-file",
        path(&s.join("shift.txt")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("c/mainiter.json").exists());
}

#[test]
fn john_prints_shape_and_margins() {
    let dir = tempfile::tempdir().unwrap();
    let body = dir.path().join("k.csv");
    std::fs::write(&body, "# square\n1,0\n0,1\n").unwrap();
    let o = sparsedom(&["--out", path(dir.path()), "convex", "john", "--body", path(&body)]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("shape matrix"));
    assert!(text.contains("inner margin"));
}

#[test]
fn weights_sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = sparsedom(&[
        "--out",
        path(dir.path()),
        "weights",
        "sweep",
        "--family",
        "rotating",
        "--a-grid",
        "0:0.9:3",
        "--shift-seed",
        "7",
        "--finest",
        "6",
        "--shifts",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let csv = std::fs::read_to_string(dir.path().join("weights_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("param,characteristic,norm,ratio,slope_so_far"));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"scalar": {"trials": 4, "finest": 8, "rho_max": 3}}"#).unwrap();
    let o = sparsedom(&["--config", path(&cfg), "--out", path(dir.path()), "verify-scalar", "--trials", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let csv = std::fs::read_to_string(dir.path().join("scalar_trials.csv")).unwrap();
    // 3 trials × 3 complexities, one of them possibly discarded.
    assert!(csv.lines().count() <= 10 && csv.lines().count() >= 7);

    std::fs::write(&cfg, r#"{"scalar": {"trails": 4}}"#).unwrap();
    assert_eq!(code(&sparsedom(&["--config", path(&cfg), "--out", path(dir.path()), "verify-scalar"])), 2);
}

#[test]
fn verify_vector_small() {
    let dir = tempfile::tempdir().unwrap();
    let o = sparsedom(&[
        "--out",
        path(dir.path()),
        "verify-vector",
        "--trials",
        "4",
        "--finest",
        "8",
        "--rho-max",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("n=1 reproduction"));
}

#[test]
fn run_all_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = sparsedom(&["--out", path(d), "--seed", "11", "run-all", "--quick", "--suite", "shift,convex"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    }
    for f in ["summary.json", "shift/shift.json", "convex/convex.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn empty_suite_list_is_a_noop() {
    let dir = tempfile::tempdir().unwrap();
    let o = sparsedom(&["--out", path(dir.path()), "run-all", "--suite", ""]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(dir.path().join("summary.json")).unwrap().trim(), "[]");
}

#[test]
fn unknown_suite_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&sparsedom(&["--out", path(dir.path()), "run-all", "--suite", "everything"])), 2);
}
