//! Calderón–Zygmund decompositions and per-step checkers for the main iteration.
//!
//! For a base cube `Q` with stopping cubes `ℐ_Q` (union `E`), the kernels split as
//! `𝒢 = {R : R not inside any I ∈ ℐ_Q}` plus the lattices `𝒟(I)`. The checkers
//! recompute every inequality of the iteration with explicit constants.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::convex::{
    contains, default_dilation, direction_bank, john_ellipsoid, minkowski_product, vector_stopping, Zonotope,
};
use crate::dyadic::{DyadicCube, GridFunction, Pyramid};
use crate::error::{Error, Result};
use crate::numeric::{dot, norm2, CompensatedSum};
use crate::shift::{DyadicShift, PreparedPair, Selection, ShiftKernel};
use crate::sparse::{stopping_children, vector_stopping_children, DEFAULT_LAMBDA};

/// `f 1_Q = g + Σ_I b_I` with `g` equal to the average of `f` on each `I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CZDecomposition {
    pub base: DyadicCube,
    pub stopping: Vec<DyadicCube>,
    pub good: GridFunction,
    /// `Σ_I b_I`; the parts have disjoint supports, so `b_I = bad · 1_I`.
    pub bad: GridFunction,
}

fn check_stopping(q: &DyadicCube, stopping: &[DyadicCube], finest: u32) -> Result<()> {
    let mut ranges: Vec<(std::ops::Range<usize>, DyadicCube)> = Vec::with_capacity(stopping.len());
    for i in stopping {
        if !q.strictly_contains(i) {
            return Err(Error::Collection(format!("{i:?} is not a strict subcube of {q:?}")));
        }
        ranges.push((i.cell_range(finest), *i));
    }
    ranges.sort_by_key(|r| r.0.start);
    for w in ranges.windows(2) {
        if w[1].0.start < w[0].0.end {
            return Err(Error::Collection(format!("stopping cubes {:?} and {:?} overlap", w[0].1, w[1].1)));
        }
    }
    Ok(())
}

/// Decomposes `f 1_Q` along pairwise disjoint strict subcubes of `Q`.
pub fn cz_decompose(f: &GridFunction, q: &DyadicCube, stopping: &[DyadicCube]) -> Result<CZDecomposition> {
    f.check_cube(q)?;
    for i in stopping {
        f.check_cube(i)?;
    }
    check_stopping(q, stopping, f.finest())?;
    let n = f.n();
    let mut good = f.restrict(q)?;
    let mut bad = GridFunction::zeros(f.dim(), f.finest(), n)?;
    let mut sorted = stopping.to_vec();
    sorted.sort();
    for i in &sorted {
        let avg = f.signed_average(i)?;
        for c in i.cell_range(f.finest()) {
            let v = f.value(c).to_vec();
            for k in 0..n {
                good.value_mut(c)[k] = avg[k];
                bad.value_mut(c)[k] = v[k] - avg[k];
            }
        }
    }
    Ok(CZDecomposition {
        base: *q,
        stopping: sorted,
        good,
        bad,
    })
}

impl CZDecomposition {
    pub fn bad_part(&self, i: &DyadicCube) -> Result<GridFunction> {
        self.bad.restrict(i)
    }

    /// `‖b_I‖_1` (Euclidean magnitude for vector values).
    pub fn bad_l1(&self, i: &DyadicCube) -> f64 {
        let mut s = CompensatedSum::default();
        for c in i.cell_range(self.bad.finest()) {
            s.add(norm2(self.bad.value(c)));
        }
        s.total() * self.bad.cell_measure()
    }

    /// `∫_I b_I` per coordinate (compensated).
    pub fn bad_integral(&self, i: &DyadicCube) -> Vec<f64> {
        let n = self.bad.n();
        let mut sums = vec![CompensatedSum::default(); n];
        for c in i.cell_range(self.bad.finest()) {
            for (s, v) in sums.iter_mut().zip(self.bad.value(c)) {
                s.add(*v);
            }
        }
        sums.iter().map(|s| s.total() * self.bad.cell_measure()).collect()
    }

    /// `R` lies inside a single stopping cube.
    pub fn inside_stopping(&self, r: &DyadicCube) -> bool {
        let set: BTreeSet<DyadicCube> = self.stopping.iter().copied().collect();
        inside_any(&set, r)
    }

    /// Largest cell-wise deviation `|f 1_Q − g − b|`.
    pub fn reconstruction_error(&self, f: &GridFunction) -> Result<f64> {
        let fq = f.restrict(&self.base)?;
        let mut err = 0.0f64;
        for c in 0..fq.num_cells() {
            for k in 0..fq.n() {
                err = err.max((fq.value(c)[k] - self.good.value(c)[k] - self.bad.value(c)[k]).abs());
            }
        }
        Ok(err)
    }
}

fn inside_any(set: &BTreeSet<DyadicCube>, r: &DyadicCube) -> bool {
    (0..=r.depth()).any(|d| set.contains(&r.ancestor(d).unwrap()))
}

/// Scalar CZ constants measured against `2^d λ`, `(2^d λ)^{1/2}` and `2^{d+1} λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CzReport {
    pub average: f64,
    pub linf: f64,
    pub linf_bound: f64,
    pub l2: f64,
    pub l2_bound: f64,
    /// `max_I ‖b_I‖_1 / (2^{d+1} λ |I| ⟨f⟩_Q)`.
    pub bad_ratio: f64,
    /// `max |f 1_Q − g − b| / max |f|`.
    pub reconstruction_error: f64,
    /// `max_I |∫_I b_I| / ‖f 1_I‖_1`.
    pub mean_zero_error: f64,
    pub passed: bool,
}

pub fn cz_report(f: &GridFunction, dec: &CZDecomposition, lambda: f64) -> Result<CzReport> {
    let q = &dec.base;
    let fine = f.finest();
    let avg = f.abs_average(q)?;
    let dl = (1u64 << f.dim()) as f64 * lambda;
    let mut linf = 0.0f64;
    let mut l1 = CompensatedSum::default();
    let mut l2 = CompensatedSum::default();
    for c in q.cell_range(fine) {
        let m = norm2(dec.good.value(c));
        linf = linf.max(m);
        l1.add(m);
        l2.add(m * m);
    }
    let cell = f.cell_measure();
    let l2v = (l2.total() * cell).sqrt();
    let scale = f.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let recon = dec.reconstruction_error(f)?;
    let mut bad_ratio = 0.0f64;
    let mut mean_err = 0.0f64;
    for i in &dec.stopping {
        let b = dec.bad_l1(i);
        let bound = 2.0 * dl * i.measure() * avg;
        bad_ratio = bad_ratio.max(if bound > 0.0 { b / bound } else if b > 0.0 { f64::INFINITY } else { 0.0 });
        let mass = f.abs_integral(i)?;
        if mass > 0.0 {
            mean_err = mean_err.max(norm2(&dec.bad_integral(i)) / mass);
        }
    }
    let linf_bound = dl * avg;
    let l2_bound = dl.sqrt() * q.measure().sqrt() * avg;
    let recon_rel = if scale > 0.0 { recon / scale } else { recon };
    let tol = 1.0 + 1e-12;
    let passed = linf <= linf_bound * tol
        && l2v <= l2_bound * tol
        && bad_ratio <= tol
        && recon_rel <= 1e-12
        && mean_err <= 1e-14;
    Ok(CzReport {
        average: avg,
        linf,
        linf_bound,
        l2: l2v,
        l2_bound,
        bad_ratio,
        reconstruction_error: recon_rel,
        mean_zero_error: mean_err,
        passed,
    })
}

/// Decomposition along a vector stopping family; the family must come from the
/// vector rule for `f` at dilation `a`: it covers every stopping cube of `f` and
/// none of its cubes lies strictly inside one.
pub fn cz_decompose_body(f: &GridFunction, q: &DyadicCube, stopping: &[DyadicCube], a: f64) -> Result<CZDecomposition> {
    let own = vector_stopping(f, q, a)?;
    let set: BTreeSet<DyadicCube> = stopping.iter().copied().collect();
    for j in &own.cubes {
        if !inside_any(&set, j) {
            return Err(Error::Collection(format!(
                "stopping family misses {j:?}, which violates the containment for this function"
            )));
        }
        if let Some(i) = stopping.iter().find(|i| j.strictly_contains(i)) {
            return Err(Error::Collection(format!(
                "{i:?} lies strictly inside the stopping cube {j:?}; the family is not generated by the vector rule"
            )));
        }
    }
    cz_decompose(f, q, stopping)
}

/// Containment constants of a body-valued decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyCzReport {
    /// `C_good = 2^d A`: `g(x) ∈ C_good ⟨f⟩_Q`.
    pub c_good: f64,
    /// `C_bad = 2^{d+1} A`: `⟨b_I⟩_I ⊂ C_bad ⟨f⟩_Q`.
    pub c_bad: f64,
    /// `2^d A sqrt(n)`, the radius in the John-normalized frame.
    pub c_ball: f64,
    /// Smallest `t` with every `g(x) ∈ t ⟨f⟩_Q`, divided by `C_good`.
    pub good_ratio: f64,
    pub bad_ratio: f64,
    pub exact: bool,
    pub passed: bool,
}

/// Largest `max_a |⟨p, a⟩| / h_K(a)` over points and facet normals (plus the bank for `n = 2`).
fn points_ratio(k: &Zonotope, pts: &[Vec<f64>]) -> (f64, bool) {
    let normals = k.facet_normals();
    let extra: &[Vec<f64>] = if k.n() == 2 { direction_bank(2) } else { &[] };
    let mut ratio = 0.0f64;
    for u in normals.dirs.iter().chain(extra) {
        let h = k.support(u);
        for p in pts {
            let v = dot(p, u).abs();
            if v <= 1e-12 * norm2(p) {
                continue;
            }
            ratio = ratio.max(if h > 0.0 { v / h } else { f64::INFINITY });
        }
    }
    (ratio, normals.exact)
}

pub fn body_cz_report(f: &GridFunction, dec: &CZDecomposition, a: f64) -> Result<BodyCzReport> {
    let q = &dec.base;
    let d = (1u64 << f.dim()) as f64;
    let kq = Zonotope::body_average(f, q)?;
    let mut pts: Vec<Vec<f64>> = q.cell_range(f.finest()).map(|c| dec.good.value(c).to_vec()).collect();
    pts.sort_by(|x, y| x.iter().zip(y).map(|(a, b)| a.total_cmp(b)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    pts.dedup();
    let c_good = d * a;
    let c_bad = 2.0 * d * a;
    let (gr, mut exact) = points_ratio(&kq, &pts);
    let mut bad_ratio = 0.0f64;
    for i in &dec.stopping {
        let kb = Zonotope::body_average(&dec.bad, i)?;
        let c = contains(&kq, &kb, 1.0, 0.0)?;
        exact &= c.exact;
        bad_ratio = bad_ratio.max(c.ratio / c_bad);
    }
    let good_ratio = gr / c_good;
    let tol = 1.0 + 1e-9;
    Ok(BodyCzReport {
        c_good,
        c_bad,
        c_ball: c_good * (f.n() as f64).sqrt(),
        good_ratio,
        bad_ratio,
        exact,
        passed: good_ratio <= tol && bad_ratio <= tol,
    })
}

/// Partition of cubes by depth modulo `ρ`; class `m` holds depths `≡ m (mod ρ)`.
pub fn scale_split(cubes: &[DyadicCube], rho: u32) -> Result<Vec<Vec<DyadicCube>>> {
    if rho == 0 {
        return Err(Error::InvalidParameter("complexity must be at least 1".into()));
    }
    let mut out = vec![Vec::new(); rho as usize];
    for q in cubes {
        out[(q.depth() % rho) as usize].push(*q);
    }
    for c in &mut out {
        c.sort();
    }
    Ok(out)
}

/// The ancestor `R ⊋ I` with depth in `class` and `ℓ(R) < 2^ρ ℓ(I)`, if any.
///
/// The window is `depth(I) − ρ < depth(R) < depth(I)`; it is empty for `ρ = 1`,
/// where every kernel is constant on the children of its cube.
pub fn r_of_i(i: &DyadicCube, class: &BTreeSet<u32>, rho: u32) -> Option<DyadicCube> {
    let lo = (i.depth() + 1).saturating_sub(rho);
    (lo..i.depth()).rev().find(|d| class.contains(d)).and_then(|d| i.ancestor(d))
}

fn class_depths(finest: u32, rho: u32, m: u32) -> BTreeSet<u32> {
    (0..=finest).filter(|d| d % rho == m).collect()
}

/// `S_R(u, v)` where one argument is given by a pyramid and the other directly
/// on cells, restricted to the cube `i`.
fn kernel_against_part(k: &ShiftKernel, pyr: &Pyramid, part: &GridFunction, i: &DyadicCube, part_second: bool) -> f64 {
    let fine = part.finest();
    let cell = part.cell_measure();
    let n = part.n();
    let part_integral = |s: &DyadicCube, c: usize| -> f64 {
        let region = if s.contains(i) {
            *i
        } else if i.contains(s) {
            *s
        } else {
            return 0.0;
        };
        let mut acc = CompensatedSum::default();
        for x in region.cell_range(fine) {
            acc.add(part.value(x)[c]);
        }
        acc.total() * cell
    };
    let mut total = 0.0;
    for c in 0..n {
        let (a, b): (Vec<f64>, Vec<f64>) = if part_second {
            (
                (0..k.rows()).map(|r| pyr.get(&k.row_cube(r))[c]).collect(),
                (0..k.cols()).map(|s| part_integral(&k.col_cube(s), c)).collect(),
            )
        } else {
            (
                (0..k.rows()).map(|r| part_integral(&k.row_cube(r), c)).collect(),
                (0..k.cols()).map(|s| pyr.get(&k.col_cube(s))[c]).collect(),
            )
        };
        total += k.form_from_integrals(&a, &b);
    }
    total
}

/// Worst normalized `|S_R(g, b_I)|` over kernel cubes far above `I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct CancellationReport {
    pub pairs: usize,
    pub max_abs: f64,
    /// `max |S_R(·,·)| / ((1/|R|) ‖u 1_R‖_1 ‖b_I‖_1)`.
    pub max_rel: f64,
}

impl CancellationReport {
    fn merge(&mut self, o: CancellationReport) {
        self.pairs += o.pairs;
        self.max_abs = self.max_abs.max(o.max_abs);
        self.max_rel = self.max_rel.max(o.max_rel);
    }
}

/// Evaluates `S_R(u, b_I)` (or `S_R(b_I, u)`) for every kernel `R ⊋ I` with
/// `ℓ(R) ≥ 2^ρ ℓ(I)`; all of them vanish because `b_I` has zero mean.
pub fn cancellation_check(
    shift: &DyadicShift,
    u: &GridFunction,
    dec: &CZDecomposition,
    bad_second: bool,
) -> Result<CancellationReport> {
    u.check_compatible(&dec.bad)?;
    let rho = shift.rho();
    let pyr = u.signed_pyramid();
    let mass = u.mass_pyramid();
    let mut rep = CancellationReport::default();
    for i in &dec.stopping {
        if i.depth() < rho {
            continue;
        }
        let bl1 = dec.bad_l1(i);
        for d in 0..=(i.depth() - rho) {
            let r = i.ancestor(d).unwrap();
            let Some(k) = shift.kernel(&r) else { continue };
            let v = kernel_against_part(k, &pyr, &dec.bad, i, bad_second);
            let scale = mass.scalar(&r) * bl1 / r.measure();
            rep.pairs += 1;
            rep.max_abs = rep.max_abs.max(v.abs());
            if scale > 0.0 {
                rep.max_rel = rep.max_rel.max(v.abs() / scale);
            } else if v != 0.0 {
                rep.max_rel = f64::INFINITY;
            }
        }
    }
    Ok(rep)
}

/// The four pieces of one scale class `𝒢′_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: u32,
    pub kernels: usize,
    pub total: f64,
    pub good_good: f64,
    pub good_bad: f64,
    pub bad_good: f64,
    pub bad_bad: f64,
    /// `|total − Σ pieces| / (|Q| ⟨f1⟩ ⟨f2⟩)`.
    pub identity_error: f64,
    /// `Λ ‖g1‖_2 ‖g2‖_2`.
    pub good_good_bound: f64,
    /// `‖g1‖_∞ Σ_{I: R(I) ∈ 𝒢′_m} ‖b2_I‖_1`.
    pub good_bad_bound: f64,
    pub bad_good_bound: f64,
    /// `Σ_R |R|^{-1} (Σ_{R(I)=R} ‖b1_I‖_1)(Σ_{R(I)=R} ‖b2_I‖_1)`.
    pub bad_bad_bound: f64,
    /// `|Q| ⟨f1⟩_Q ⟨f2⟩_Q`, the scale of the rounding slack.
    pub scale: f64,
}

impl ClassReport {
    fn within_bounds(&self) -> bool {
        let ok = |v: f64, b: f64| v.abs() <= b * (1.0 + 1e-9) + 1e-12 * self.scale;
        ok(self.good_good, self.good_good_bound)
            && ok(self.good_bad, self.good_bad_bound)
            && ok(self.bad_good, self.bad_good_bound)
            && ok(self.bad_bad, self.bad_bad_bound)
            && self.identity_error <= 1e-9
    }
}

/// Outcome of one main-iteration step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainIterReport {
    pub rho: u32,
    pub stopping: usize,
    pub lhs: f64,
    /// `Σ_I |S_{𝒟(I)}(f1 1_I, f2 1_I)|`.
    pub recursion: f64,
    /// `S_𝒢(f1 1_Q, f2 1_Q)`.
    pub good_total: f64,
    /// `|S − S_𝒢 − Σ_I S_{𝒟(I)}|` relative to the normalizer.
    pub split_error: f64,
    /// `ρ |Q| ⟨f1⟩_Q ⟨f2⟩_Q`.
    pub normalizer: f64,
    pub residual: f64,
    pub envelope: f64,
    /// Certified subshift norm bound `Λ` (1 when the shift is uncertified).
    pub lambda_bound: f64,
    pub certified: bool,
    pub classes: Vec<ClassReport>,
    pub cz: [CzReport; 2],
    pub cancellation: CancellationReport,
    /// `max_R Σ_{R(I)=R} ‖b_I‖_1 / (2 |R| ⟨f 1_Q⟩_R)` over both functions.
    pub theabove_mass: f64,
    /// `max_R ⟨f 1_Q⟩_R / (λ ⟨f⟩_Q)` over kernels `R ∈ 𝒢`.
    pub theabove_average: f64,
    pub passed: bool,
}

/// Per-class constant `Λ 2^d λ + 2^{d+2} λ + 4 λ`.
pub fn class_constant(dim: usize, lambda: f64, lambda_bound: f64) -> f64 {
    let d = (1u64 << dim) as f64;
    lambda_bound * d * lambda + 4.0 * d * lambda + 4.0 * lambda
}

fn norms_of(g: &GridFunction, q: &DyadicCube) -> (f64, f64) {
    let mut linf = 0.0f64;
    let mut l2 = CompensatedSum::default();
    for c in q.cell_range(g.finest()) {
        let m = norm2(g.value(c));
        linf = linf.max(m);
        l2.add(m * m);
    }
    (linf, (l2.total() * g.cell_measure()).sqrt())
}

struct Split<'a> {
    shift: &'a DyadicShift,
    q: DyadicCube,
    stopping: BTreeSet<DyadicCube>,
    dec: [CZDecomposition; 2],
    lambda_bound: f64,
}

impl Split<'_> {
    fn in_g(&self, r: &DyadicCube) -> bool {
        !inside_any(&self.stopping, r)
    }

    fn classes(&self) -> Vec<ClassReport> {
        let rho = self.shift.rho();
        let finest = self.shift.finest();
        let pg = PreparedPair::new(&self.dec[0].good, &self.dec[1].good).unwrap();
        let pgb = PreparedPair::new(&self.dec[0].good, &self.dec[1].bad).unwrap();
        let pbg = PreparedPair::new(&self.dec[0].bad, &self.dec[1].good).unwrap();
        let pbb = PreparedPair::new(&self.dec[0].bad, &self.dec[1].bad).unwrap();
        let f1q = self.dec[0].good.add(&self.dec[0].bad).unwrap();
        let f2q = self.dec[1].good.add(&self.dec[1].bad).unwrap();
        let pf = PreparedPair::new(&f1q, &f2q).unwrap();
        let (g1inf, g1l2) = norms_of(&self.dec[0].good, &self.q);
        let (g2inf, g2l2) = norms_of(&self.dec[1].good, &self.q);
        let denom = self.q.measure() * f1q.abs_average(&self.q).unwrap() * f2q.abs_average(&self.q).unwrap();
        let mut out = Vec::with_capacity(rho as usize);
        for m in 0..rho {
            let depths = class_depths(finest, rho, m);
            let pred = |r: &DyadicCube| r.depth() % rho == m && self.in_g(r);
            let sel = Selection::Predicate(&pred);
            let kernels = self.shift.cubes().filter(|r| pred(r)).count();
            let total = self.shift.form_prepared(&pf, sel);
            let gg = self.shift.form_prepared(&pg, sel);
            let gb = self.shift.form_prepared(&pgb, sel);
            let bg = self.shift.form_prepared(&pbg, sel);
            let bb = self.shift.form_prepared(&pbb, sel);
            let mut per_r: BTreeMap<DyadicCube, (f64, f64)> = BTreeMap::new();
            for i in &self.dec[0].stopping {
                if let Some(r) = r_of_i(i, &depths, rho) {
                    if self.shift.kernel(&r).is_some() && self.in_g(&r) {
                        let e = per_r.entry(r).or_insert((0.0, 0.0));
                        e.0 += self.dec[0].bad_l1(i);
                        e.1 += self.dec[1].bad_l1(i);
                    }
                }
            }
            let sum1 = per_r.values().fold(0.0, |a, v| a + v.0);
            let sum2 = per_r.values().fold(0.0, |a, v| a + v.1);
            let chain = per_r.iter().fold(0.0, |a, (r, v)| a + v.0 * v.1 / r.measure());
            let identity = (total - (gg + gb + bg + bb)).abs();
            out.push(ClassReport {
                class: m,
                kernels,
                total,
                good_good: gg,
                good_bad: gb,
                bad_good: bg,
                bad_bad: bb,
                identity_error: if denom > 0.0 { identity / denom } else { identity },
                good_good_bound: self.lambda_bound * g1l2 * g2l2,
                good_bad_bound: g1inf * sum2,
                bad_good_bound: g2inf * sum1,
                bad_bad_bound: chain,
                scale: denom,
            });
        }
        out
    }

    /// Mass and average ratios for every kernel `R ∈ 𝒢` with some `R(I) = R`.
    fn theabove(&self, f1q: &GridFunction, f2q: &GridFunction, lambda: f64) -> (f64, f64) {
        let rho = self.shift.rho();
        let finest = self.shift.finest();
        let mut groups: BTreeMap<DyadicCube, Vec<DyadicCube>> = BTreeMap::new();
        for m in 0..rho {
            let depths = class_depths(finest, rho, m);
            for i in &self.dec[0].stopping {
                if let Some(r) = r_of_i(i, &depths, rho) {
                    if self.shift.kernel(&r).is_some() && self.in_g(&r) {
                        groups.entry(r).or_default().push(*i);
                    }
                }
            }
        }
        let mut mass_ratio = 0.0f64;
        let avgs = [f1q.abs_average(&self.q).unwrap(), f2q.abs_average(&self.q).unwrap()];
        let fs = [f1q, f2q];
        for (r, is) in &groups {
            for j in 0..2 {
                let s: f64 = is.iter().map(|i| self.dec[j].bad_l1(i)).sum();
                let bound = 2.0 * fs[j].abs_integral(r).unwrap();
                mass_ratio = mass_ratio.max(if bound > 0.0 { s / bound } else if s > 0.0 { f64::INFINITY } else { 0.0 });
            }
        }
        let mut avg_ratio = 0.0f64;
        for r in self.shift.cubes().filter(|r| self.in_g(r) && !r.is_disjoint(&self.q)) {
            for j in 0..2 {
                let a = fs[j].abs_average(r).unwrap();
                let bound = lambda * avgs[j];
                avg_ratio = avg_ratio.max(if bound > 0.0 { a / bound } else if a > 0.0 { f64::INFINITY } else { 0.0 });
            }
        }
        (mass_ratio, avg_ratio)
    }
}

fn certified_bound(shift: &DyadicShift) -> (f64, bool) {
    let c = shift.certificate();
    if c.is_certified() {
        (c.bound.max(0.0), true)
    } else {
        (1.0, false)
    }
}

/// Checks one step of the scalar main iteration at `Q` with the stopping rule at `λ = 2^8`.
pub fn mainiter_check(shift: &DyadicShift, f1: &GridFunction, f2: &GridFunction, q: &DyadicCube) -> Result<MainIterReport> {
    mainiter_check_with(shift, f1, f2, q, DEFAULT_LAMBDA)
}

pub fn mainiter_check_with(
    shift: &DyadicShift,
    f1: &GridFunction,
    f2: &GridFunction,
    q: &DyadicCube,
    lambda: f64,
) -> Result<MainIterReport> {
    if f1.n() != 1 || f2.n() != 1 {
        return Err(Error::DimensionMismatch("the scalar check expects n = 1".into()));
    }
    let stopping = stopping_children(f1, f2, q, lambda)?;
    let rep = iteration_core(shift, f1, f2, q, stopping, lambda)?;
    Ok(rep.0)
}

/// Shared scalar machinery; also returns the prepared `f_j 1_Q`.
fn iteration_core(
    shift: &DyadicShift,
    f1: &GridFunction,
    f2: &GridFunction,
    q: &DyadicCube,
    stopping: Vec<DyadicCube>,
    lambda: f64,
) -> Result<(MainIterReport, GridFunction, GridFunction)> {
    f1.check_compatible(f2)?;
    if shift.dim() != f1.dim() || shift.finest() != f1.finest() {
        return Err(Error::DimensionMismatch("shift and functions live on different grids".into()));
    }
    let rho = shift.rho().max(1);
    let f1q = f1.restrict(q)?;
    let f2q = f2.restrict(q)?;
    let p = PreparedPair::new(&f1q, &f2q)?;
    let lhs = shift.form_prepared(&p, Selection::All);
    let mut recursion = 0.0;
    let mut signed_rec = 0.0;
    for i in &stopping {
        let v = shift.form_prepared(&p, Selection::Within(*i));
        recursion += v.abs();
        signed_rec += v;
    }
    let set: BTreeSet<DyadicCube> = stopping.iter().copied().collect();
    let in_g = |r: &DyadicCube| !inside_any(&set, r);
    let good_total = shift.form_prepared(&p, Selection::Predicate(&in_g));
    let a1 = f1q.abs_average(q)?;
    let a2 = f2q.abs_average(q)?;
    let normalizer = rho as f64 * q.measure() * a1 * a2;
    let split_abs = (lhs - good_total - signed_rec).abs();
    let residual = if normalizer > 0.0 {
        (lhs.abs() - recursion).max(0.0) / normalizer
    } else if lhs.abs() > 0.0 {
        return Err(Error::Degenerate(format!(
            "vanishing average on {q:?} with a nonzero form {lhs:e}"
        )));
    } else {
        0.0
    };
    let dec1 = cz_decompose(f1, q, &stopping)?;
    let dec2 = cz_decompose(f2, q, &stopping)?;
    let cz = [cz_report(f1, &dec1, lambda)?, cz_report(f2, &dec2, lambda)?];
    let mut cancellation = cancellation_check(shift, &dec1.good, &dec2, true)?;
    cancellation.merge(cancellation_check(shift, &dec2.good, &dec1, false)?);
    cancellation.merge(cancellation_check(shift, &dec2.bad, &dec1, false)?);
    let (lambda_bound, certified) = certified_bound(shift);
    let split = Split {
        shift,
        q: *q,
        stopping: set.clone(),
        dec: [dec1, dec2],
        lambda_bound,
    };
    let classes = split.classes();
    let (theabove_mass, theabove_average) = split.theabove(&f1q, &f2q, lambda);
    let envelope = class_constant(f1.dim(), lambda, lambda_bound);
    let split_error = if normalizer > 0.0 { split_abs / normalizer } else { split_abs };
    let tol = 1.0 + 1e-9;
    let passed = residual <= envelope * tol
        && split_error <= 1e-9
        && classes.iter().all(|c| c.within_bounds())
        && cz.iter().all(|c| c.passed)
        && cancellation.max_rel <= 1e-12
        && theabove_mass <= tol
        && theabove_average <= tol;
    Ok((
        MainIterReport {
            rho,
            stopping: stopping.len(),
            lhs,
            recursion,
            good_total,
            split_error,
            normalizer,
            residual,
            envelope,
            lambda_bound,
            certified,
            classes,
            cz,
            cancellation,
            theabove_mass,
            theabove_average,
            passed,
        },
        f1q,
        f2q,
    ))
}

/// Outcome of one step of the vector main iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainIterVecReport {
    pub n: usize,
    pub dilation: f64,
    pub rho: u32,
    pub stopping: usize,
    pub stopping_exact: bool,
    pub lhs: f64,
    pub recursion: f64,
    /// `⟨f1⟩_Q ⟨f2⟩_Q` (Minkowski-product endpoint).
    pub product: f64,
    pub product_exact: bool,
    pub normalizer: f64,
    pub residual: f64,
    /// `n² C_coord`, the bound on `|S_𝒢 ⊗ Id| / (ρ |Q| ⟨f1⟩⟨f2⟩)`.
    pub envelope: f64,
    /// Per-class coordinate constant `κ A (Λ 2^d + 2^{d+2} + 4)`.
    pub coord_constant: f64,
    /// `max_{k1,k2} |S_𝒢(f̃1_{k1} 1_Q, f̃2_{k2} 1_Q)| / (ρ |Q| C_coord)`.
    pub coordwise_ratio: f64,
    /// `max_{k1,k2} |(A1 e_{k1})·(A2 e_{k2})| / ⟨f1⟩_Q⟨f2⟩_Q`.
    pub johnkl_ratio: f64,
    /// `|S_𝒢 ⊗ Id(f1 1_Q, f2 1_Q)| / (ρ |Q| ⟨f1⟩⟨f2⟩)`.
    pub goodpart_ratio: f64,
    /// Relative error of the expansion of `S_𝒢 ⊗ Id` in normalized coordinates.
    pub expansion_error: f64,
    pub kappa: f64,
    pub regularized: bool,
    pub body_cz: [BodyCzReport; 2],
    pub passed: bool,
}

/// Checks one step of the vector main iteration at `Q` with `A = 2^8 n²`.
pub fn mainitervec_check(shift: &DyadicShift, f1: &GridFunction, f2: &GridFunction, q: &DyadicCube) -> Result<MainIterVecReport> {
    f1.check_compatible(f2)?;
    let n = f1.n();
    if n > 3 {
        return Err(Error::Unsupported(format!("vector checks support n ≤ 3, got {n}")));
    }
    if shift.dim() != f1.dim() || shift.finest() != f1.finest() {
        return Err(Error::DimensionMismatch("shift and functions live on different grids".into()));
    }
    let a = default_dilation(n);
    let rho = shift.rho().max(1);
    let (stopping, stopping_exact) = vector_stopping_children(f1, f2, q, a)?;
    let set: BTreeSet<DyadicCube> = stopping.iter().copied().collect();
    let f1q = f1.restrict(q)?;
    let f2q = f2.restrict(q)?;
    let p = PreparedPair::new(&f1q, &f2q)?;
    let lhs = shift.form_prepared(&p, Selection::All);
    let recursion: f64 = stopping
        .iter()
        .map(|i| shift.form_prepared(&p, Selection::Within(*i)).abs())
        .sum();
    let in_g = |r: &DyadicCube| !inside_any(&set, r);
    let good = shift.form_prepared(&p, Selection::Predicate(&in_g));

    let k1 = Zonotope::body_average(f1, q)?;
    let k2 = Zonotope::body_average(f2, q)?;
    let prod = minkowski_product(&k1, &k2)?;
    let normalizer = rho as f64 * q.measure() * prod.value;
    let residual = if normalizer > 0.0 {
        (lhs.abs() - recursion).max(0.0) / normalizer
    } else if lhs.abs() > 0.0 {
        return Err(Error::Degenerate(format!("vanishing body product on {q:?} with a nonzero form")));
    } else {
        0.0
    };
    let dec1 = cz_decompose_body(f1, q, &stopping, a)?;
    let dec2 = cz_decompose_body(f2, q, &stopping, a)?;
    let body_cz = [body_cz_report(f1, &dec1, a)?, body_cz_report(f2, &dec2, a)?];
    let (lambda_bound, _) = certified_bound(shift);
    let d = (1u64 << f1.dim()) as f64;

    let mut regularized = false;
    let mut shapes = Vec::with_capacity(2);
    let mut kappa = 0.0f64;
    let mut bodies = Vec::with_capacity(2);
    for k in [&k1, &k2] {
        let body = if k.is_full_dimensional() {
            k.clone()
        } else {
            regularized = true;
            k.regularized()
        };
        if body.is_empty() || !body.is_full_dimensional() {
            // Zero body: the function vanishes on Q and every quantity is zero.
            shapes.push(None);
            bodies.push(body);
            continue;
        }
        let e = john_ellipsoid(&body)?;
        kappa = kappa.max(e.kappa);
        shapes.push(Some(e.shape));
        bodies.push(body);
    }
    let coord_constant = kappa.max(n as f64) * a * (lambda_bound * d + 4.0 * d + 4.0);
    let envelope = (n * n) as f64 * coord_constant;
    let (mut coordwise_ratio, mut johnkl_ratio, mut expansion_error) = (0.0f64, 0.0f64, 0.0f64);
    if let (Some(a1), Some(a2)) = (&shapes[0], &shapes[1]) {
        let inv1 = a1.clone().try_inverse().ok_or_else(|| Error::Degenerate("John shape not invertible".into()))?;
        let inv2 = a2.clone().try_inverse().ok_or_else(|| Error::Degenerate("John shape not invertible".into()))?;
        let rows = |m: &nalgebra::DMatrix<f64>| -> Vec<f64> { (0..n * n).map(|k| m[(k / n, k % n)]).collect() };
        let t1 = f1q.linear_map(&rows(&inv1), n)?;
        let t2 = f2q.linear_map(&rows(&inv2), n)?;
        let c1: Vec<GridFunction> = (0..n).map(|k| t1.coordinate(k)).collect::<Result<_>>()?;
        let c2: Vec<GridFunction> = (0..n).map(|k| t2.coordinate(k)).collect::<Result<_>>()?;
        let prod_reg = minkowski_product(&bodies[0], &bodies[1])?.value;
        let mut expansion = 0.0;
        for (i1, u) in c1.iter().enumerate() {
            for (i2, v) in c2.iter().enumerate() {
                let pp = PreparedPair::new(u, v)?;
                let s = shift.form_prepared(&pp, Selection::Predicate(&in_g));
                coordwise_ratio = coordwise_ratio.max(s.abs() / (rho as f64 * q.measure() * coord_constant));
                let col1: Vec<f64> = (0..n).map(|j| a1[(j, i1)]).collect();
                let col2: Vec<f64> = (0..n).map(|j| a2[(j, i2)]).collect();
                let w = dot(&col1, &col2);
                expansion += w * s;
                if prod_reg > 0.0 {
                    johnkl_ratio = johnkl_ratio.max(w.abs() / prod_reg);
                }
            }
        }
        let scale = good.abs().max(normalizer).max(f64::MIN_POSITIVE);
        expansion_error = (expansion - good).abs() / scale;
    }
    let goodpart_ratio = if normalizer > 0.0 { good.abs() / normalizer } else { 0.0 };
    let tol = 1.0 + 1e-9;
    let passed = residual <= envelope * tol
        && coordwise_ratio <= tol
        && johnkl_ratio <= tol
        && goodpart_ratio <= envelope * tol
        && expansion_error <= 1e-9
        && body_cz.iter().all(|b| b.passed);
    Ok(MainIterVecReport {
        n,
        dilation: a,
        rho,
        stopping: stopping.len(),
        stopping_exact,
        lhs,
        recursion,
        product: prod.value,
        product_exact: prod.exact,
        normalizer,
        residual,
        envelope,
        coord_constant,
        coordwise_ratio,
        johnkl_ratio,
        goodpart_ratio,
        expansion_error,
        kappa,
        regularized,
        body_cz,
        passed,
    })
}

/// Off-diagonal terms of the root expansion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffDiagonalReport {
    /// `Σ_{k≠ℓ} |S(f1 1_{Q_k}, f2 1_{Q_ℓ})|`.
    pub sum: f64,
    /// `2^{2d}(ρ+1)|Q̄| ⟨f1⟩_{Q̄} ⟨f2⟩_{Q̄}` scaled by `max(1, Λ)`.
    pub bound: f64,
    pub certified: bool,
    pub passed: bool,
}

pub fn offdiagonal_check(shift: &DyadicShift, f1: &GridFunction, f2: &GridFunction) -> Result<OffDiagonalReport> {
    f1.check_compatible(f2)?;
    let root = f1.root();
    let children = root.children(f1.finest())?;
    let parts1: Vec<GridFunction> = children.iter().map(|c| f1.restrict(c)).collect::<Result<_>>()?;
    let parts2: Vec<GridFunction> = children.iter().map(|c| f2.restrict(c)).collect::<Result<_>>()?;
    let mut sum = 0.0;
    for (k, u) in parts1.iter().enumerate() {
        for (l, v) in parts2.iter().enumerate() {
            if k != l {
                sum += shift.form(u, v, Selection::All)?.abs();
            }
        }
    }
    let d = (1u64 << (2 * f1.dim())) as f64;
    let (lb, certified) = certified_bound(shift);
    let bound = d * (shift.rho() as f64 + lb.max(1.0)) * f1.abs_average(&root)? * f2.abs_average(&root)?;
    Ok(OffDiagonalReport {
        sum,
        bound,
        certified,
        passed: sum <= bound * (1.0 + 1e-9),
    })
}
