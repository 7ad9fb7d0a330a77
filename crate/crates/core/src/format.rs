//! Text formats: grid-function CSV, shift files, zonotope CSV and collection CSV.
//!
//! Floats are written with 17 significant digits, which round-trips every `f64` exactly.

use std::fmt::Write as _;

use crate::convex::Zonotope;
use crate::dyadic::{check_grid, DyadicCube, GridFunction};
use crate::error::{Error, Result};
use crate::shift::{A2Certificate, A2Strategy, DyadicShift, ShiftKernel};
use crate::sparse::SparseCollection;

/// `f64` with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::parse(line, format!("`{}` is not a number", s.trim())))
}

fn parse_int<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim()
        .parse::<T>()
        .map_err(|_| Error::parse(line, format!("{what} `{}` is not a nonnegative integer", s.trim())))
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
}

fn record_line(r: &csv::StringRecord) -> usize {
    r.position().map_or(0, |p| p.line() as usize)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::parse(line, e.to_string())
}

/// Grid CSV: a `d,n,L` header row, its values, then one row of `n` values per finest cell in Morton order.
pub fn write_grid_csv(f: &GridFunction) -> String {
    let mut out = format!("d,n,L\n{},{},{}\n", f.dim(), f.n(), f.finest());
    for c in 0..f.num_cells() {
        let row: Vec<String> = f.value(c).iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn read_grid_csv(text: &str) -> Result<GridFunction> {
    let mut records = reader(text).into_records();
    let mut next = |what: &str| -> Result<csv::StringRecord> {
        match records.next() {
            Some(r) => r.map_err(csv_error),
            None => Err(Error::parse(0, format!("missing {what}"))),
        }
    };
    let head = next("header")?;
    let names: Vec<&str> = head.iter().collect();
    if names != ["d", "n", "L"] {
        return Err(Error::parse(record_line(&head), "expected the header `d,n,L`"));
    }
    let dims = next("grid size row")?;
    let line = record_line(&dims);
    if dims.len() != 3 {
        return Err(Error::parse(line, "expected three integers d,n,L"));
    }
    let dim: usize = parse_int(&dims[0], line, "d")?;
    let n: usize = parse_int(&dims[1], line, "n")?;
    let finest: u32 = parse_int(&dims[2], line, "L")?;
    check_grid(dim, finest).map_err(|e| Error::parse(line, e.to_string()))?;
    if n == 0 || n > 64 {
        return Err(Error::parse(line, format!("value dimension {n} outside 1..=64")));
    }
    let cells = 1usize << (dim as u32 * finest);
    let mut values = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_error)?;
        let line = record_line(&rec);
        if values.len() == cells * n {
            return Err(Error::parse(line, format!("more than {cells} cell rows")));
        }
        if rec.len() != n {
            return Err(Error::parse(line, format!("expected {n} values, got {}", rec.len())));
        }
        for field in rec.iter() {
            let v = parse_f64(field, line)?;
            if !v.is_finite() {
                return Err(Error::parse(line, "values must be finite"));
            }
            values.push(v);
        }
    }
    if values.len() != cells * n {
        return Err(Error::parse(0, format!("expected {cells} cell rows, got {}", values.len() / n)));
    }
    GridFunction::new(dim, finest, n, values)
}

/// Shift file: a `shift d L rho m1 m2 strategy factor bound` line, then one
/// `kernel depth i_1 .. i_d b_1 .. b_k` line per kernel cube (block row-major).
pub fn write_shift(s: &DyadicShift) -> String {
    let c = s.certificate();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "shift {} {} {} {} {} {} {} {}",
        s.dim(),
        s.finest(),
        s.rho(),
        s.m1(),
        s.m2(),
        c.strategy,
        fmt_f64(c.factor),
        fmt_f64(c.bound)
    );
    for k in s.kernels() {
        let _ = write!(out, "kernel {}", k.cube().depth());
        for i in k.cube().index() {
            let _ = write!(out, " {i}");
        }
        for v in k.block() {
            let _ = write!(out, " {}", fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

pub fn read_shift(text: &str) -> Result<DyadicShift> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hl, head) = lines.next().ok_or_else(|| Error::parse(0, "empty shift file"))?;
    let t: Vec<&str> = head.split_whitespace().collect();
    if t.len() != 9 || t[0] != "shift" {
        return Err(Error::parse(hl, "expected `shift d L rho m1 m2 strategy factor bound`"));
    }
    let dim: usize = parse_int(t[1], hl, "d")?;
    let finest: u32 = parse_int(t[2], hl, "L")?;
    let rho: u32 = parse_int(t[3], hl, "rho")?;
    let m1: u32 = parse_int(t[4], hl, "m1")?;
    let m2: u32 = parse_int(t[5], hl, "m2")?;
    check_grid(dim, finest).map_err(|e| Error::parse(hl, e.to_string()))?;
    if m1 > finest || m2 > finest {
        return Err(Error::parse(hl, format!("relative depths ({m1}, {m2}) exceed L = {finest}")));
    }
    if rho != m1.max(m2).max(1) {
        return Err(Error::parse(hl, format!("rho {rho} differs from max(1, m1, m2)")));
    }
    let strategy = A2Strategy::parse(t[6]).ok_or_else(|| Error::parse(hl, format!("unknown strategy `{}`", t[6])))?;
    let factor = parse_f64(t[7], hl)?;
    let bound = parse_f64(t[8], hl)?;
    if !(factor > 0.0) || !factor.is_finite() || bound.is_nan() || bound < 0.0 {
        return Err(Error::parse(hl, "factor must be positive and finite, bound nonnegative"));
    }
    let entries = 1usize
        .checked_shl(dim as u32 * (m1 + m2))
        .filter(|_| dim as u32 * (m1 + m2) < 40)
        .ok_or_else(|| Error::parse(hl, "kernel blocks too large"))?;
    let mut kernels = Vec::new();
    for (ln, line) in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.first() != Some(&"kernel") {
            return Err(Error::parse(ln, "expected a `kernel` record"));
        }
        if t.len() != 2 + dim + entries {
            return Err(Error::parse(ln, format!("expected {} fields, got {}", 2 + dim + entries, t.len())));
        }
        let depth: u32 = parse_int(t[1], ln, "depth")?;
        if depth > finest {
            return Err(Error::parse(ln, format!("depth {depth} exceeds L = {finest}")));
        }
        let index: Vec<u32> = t[2..2 + dim]
            .iter()
            .map(|s| parse_int(s, ln, "index"))
            .collect::<Result<_>>()?;
        let cube = DyadicCube::new(dim, depth, &index).map_err(|e| Error::parse(ln, e.to_string()))?;
        let block: Vec<f64> = t[2 + dim..].iter().map(|s| parse_f64(s, ln)).collect::<Result<_>>()?;
        kernels.push(ShiftKernel::new(cube, m1, m2, block).map_err(|e| Error::parse(ln, e.to_string()))?);
    }
    let shift = DyadicShift::new(dim, finest, m1, m2, kernels).map_err(|e| Error::parse(0, e.to_string()))?;
    Ok(shift.with_certificate(A2Certificate { strategy, factor, bound }))
}

/// Zonotope CSV: one generator per row, all rows of equal length.
pub fn write_zonotope_csv(z: &Zonotope) -> String {
    let mut out = String::new();
    for g in z.generators() {
        let row: Vec<String> = g.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn read_zonotope_csv(text: &str) -> Result<Zonotope> {
    let mut n = None;
    let mut flat = Vec::new();
    for rec in reader(text).into_records() {
        let rec = rec.map_err(csv_error)?;
        let line = record_line(&rec);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let width = *n.get_or_insert(rec.len());
        if rec.len() != width {
            return Err(Error::parse(line, format!("expected {width} coordinates, got {}", rec.len())));
        }
        if width == 0 || width > crate::convex::MAX_BODY_DIM {
            return Err(Error::parse(line, format!("bodies live in R^1..R^{}", crate::convex::MAX_BODY_DIM)));
        }
        if flat.len() / width >= 4096 {
            return Err(Error::parse(line, "more than 4096 generators"));
        }
        for field in rec.iter() {
            let v = parse_f64(field, line)?;
            if !v.is_finite() {
                return Err(Error::parse(line, "coordinates must be finite"));
            }
            flat.push(v);
        }
    }
    let n = n.ok_or_else(|| Error::parse(0, "no generators"))?;
    Zonotope::new(n, &flat)
}

/// Collection CSV: `depth, index_1..index_d, witness_measure, layer` per cube.
pub fn write_collection_csv(s: &SparseCollection) -> String {
    let mut out = String::from("depth");
    for k in 0..s.dim() {
        let _ = write!(out, ",index{k}");
    }
    out.push_str(",witness_measure,layer\n");
    let cell = (-((s.dim() as u32 * s.finest()) as f64)).exp2();
    for node in s.nodes() {
        let _ = write!(out, "{}", node.cube.depth());
        for i in node.cube.index() {
            let _ = write!(out, ",{i}");
        }
        let _ = writeln!(out, ",{},{}", fmt_f64(node.witness_cells as f64 * cell), node.layer);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shift::{random_shift, RandomShiftSpec};
    use proptest::prelude::*;

    #[test]
    fn grid_round_trip_small() {
        let f = GridFunction::new(1, 2, 2, vec![0.1, -2.5, 1e-300, 3.0, f64::MAX, -0.0, 7.0, 1.0 / 3.0]).unwrap();
        let text = write_grid_csv(&f);
        assert!(text.starts_with("d,n,L\n1,2,2\n"));
        let g = read_grid_csv(&text).unwrap();
        assert_eq!(f.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), g.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn grid_errors_carry_lines() {
        let e = read_grid_csv("d,n,L\n1,1,1\n1.0\nx\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 4, .. }), "{e}");
        assert!(read_grid_csv("d,n,L\n1,1,1\n1.0\n").is_err());
        assert!(read_grid_csv("d,n,L\n1,1,1\n1\n2\n3\n").is_err());
        assert!(read_grid_csv("a,b,c\n1,1,1\n1\n2\n").is_err());
        assert!(read_grid_csv("d,n,L\n1,1,99\n").is_err());
        assert!(read_grid_csv("d,n,L\n1,1,1\nnan\n1\n").is_err());
    }

    #[test]
    fn shift_errors() {
        assert!(read_shift("").is_err());
        assert!(read_shift("shift 1 3 2 1 2 none 1 inf\nkernel 0 0 1 2\n").is_err());
        assert!(read_shift("shift 1 3 3 1 2 none 1 inf\n").is_err());
        assert!(read_shift("shift 1 3 2 1 2 bogus 1 inf\n").is_err());
        // Entry above 1/|Q| violates the size bound.
        let big = format!("shift 1 3 1 1 1 none 1 inf\nkernel 0 0 2 0 0 0\n");
        assert!(read_shift(&big).is_err());
        let ok = read_shift("shift 1 3 1 1 1 none 1 inf\n# comment\nkernel 1 1 0.5 0 0 -0.5\n").unwrap();
        assert_eq!(ok.len(), 1);
    }

    #[test]
    fn zonotope_parsing() {
        let z = read_zonotope_csv("# body\n1,0\n0,2\n").unwrap();
        assert_eq!(z.n(), 2);
        assert_eq!(z.support(&[1.0, 1.0]), 3.0);
        assert!(read_zonotope_csv("1,0\n1\n").is_err());
        assert!(read_zonotope_csv("").is_err());
        assert!(read_zonotope_csv("1,2,3,4\n").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn grid_round_trip(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 16)) {
            let f = GridFunction::new(2, 1, 4, vals).unwrap();
            let g = read_grid_csv(&write_grid_csv(&f)).unwrap();
            prop_assert!(f.values().iter().zip(g.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn shift_round_trip(seed in any::<u64>(), dim in 1usize..3, rho in 1u32..3) {
            let finest = if dim == 1 { 6 } else { 3 };
            let s = random_shift(seed, &RandomShiftSpec::new(dim, finest, rho, 0.4)).unwrap();
            let text = write_shift(&s);
            let t = read_shift(&text).unwrap();
            prop_assert_eq!(&s, &t);
            prop_assert_eq!(write_shift(&t), text);
        }

        #[test]
        fn zonotope_round_trip(gens in proptest::collection::vec(-1e6f64..1e6, 2..24)) {
            let n = 2;
            let len = gens.len() / n * n;
            let z = Zonotope::new(n, &gens[..len]).unwrap();
            let w = read_zonotope_csv(&write_zonotope_csv(&z)).unwrap();
            prop_assert_eq!(z, w);
        }
    }
}
