//! Dyadic shifts: per-cube kernel blocks, bilinear forms, A2 normalization and
//! a brute-force subshift-norm oracle.
//!
//! A kernel on `Q` with relative depths `(m1, m2)` is a block indexed by the
//! depth-`m1` subcubes `R` (rows) and depth-`m2` subcubes `S` (columns) of `Q`:
//! `S_Q(f1, f2) = Σ_{R,S} block[R,S] (∫_R f1)(∫_S f2)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyadic::{check_grid, DyadicCube, GridFunction, Pyramid};
use crate::error::{Error, Result};
use crate::linalg::{dense_spectral_norm, spectral_norm, LinearOperator, NormEstimate, PowerConfig};

/// Limit on block entries per kernel (`2^{d m1} · 2^{d m2}`).
pub const MAX_BLOCK_ENTRIES: usize = 1 << 16;

/// Default limit on kernel count for exact subcollection enumeration.
pub const EXACT_SMALL_LIMIT: usize = 12;

/// Largest grid on which [`random_shift`] picks exact-small by default; each
/// subcollection norm is a dense SVD of a `cells × cells` matrix.
pub const EXACT_SMALL_CELLS: usize = 256;

/// Largest cell count for the assembled-operator oracle.
pub const ORACLE_CELL_LIMIT: usize = 4096;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftKernel {
    cube: DyadicCube,
    m1: u32,
    m2: u32,
    block: Vec<f64>,
}

impl fmt::Debug for ShiftKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ShiftKernel({:?}, m1={}, m2={})", self.cube, self.m1, self.m2)
    }
}

impl ShiftKernel {
    /// Validates shape and the size bound `|entry| ≤ 1/|Q|`.
    pub fn new(cube: DyadicCube, m1: u32, m2: u32, block: Vec<f64>) -> Result<Self> {
        let d = cube.dim() as u32;
        let entries = 1usize
            .checked_shl(d * (m1 + m2))
            .filter(|_| d * (m1 + m2) < 63)
            .ok_or(Error::SizeOverflow {
                size: usize::MAX,
                limit: MAX_BLOCK_ENTRIES,
            })?;
        if entries > MAX_BLOCK_ENTRIES {
            return Err(Error::SizeOverflow {
                size: entries,
                limit: MAX_BLOCK_ENTRIES,
            });
        }
        if block.len() != entries {
            return Err(Error::DimensionMismatch(format!(
                "block on {cube} needs {entries} entries, got {}",
                block.len()
            )));
        }
        let bound = 1.0 / cube.measure();
        for (i, v) in block.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::AxiomViolation {
                    cube: cube.to_string(),
                    axiom: "A1",
                    detail: format!("entry {i} is not finite"),
                });
            }
            if v.abs() > bound {
                return Err(Error::AxiomViolation {
                    cube: cube.to_string(),
                    axiom: "A1",
                    detail: format!("|entry {i}| = {:e} exceeds 1/|Q| = {bound:e}", v.abs()),
                });
            }
        }
        Ok(ShiftKernel { cube, m1, m2, block })
    }

    /// Block `a · e_r e_s^T`.
    pub fn rank_one(cube: DyadicCube, m1: u32, m2: u32, a: f64, r: usize, s: usize) -> Result<Self> {
        let d = cube.dim() as u32;
        let cols = 1usize << (d * m2);
        let mut block = vec![0.0; (1usize << (d * m1)) * cols];
        block[r * cols + s] = a;
        Self::new(cube, m1, m2, block)
    }

    /// Block `≡ c`.
    pub fn constant(cube: DyadicCube, m1: u32, m2: u32, c: f64) -> Result<Self> {
        let d = cube.dim() as u32;
        Self::new(cube, m1, m2, vec![c; 1usize << (d * (m1 + m2))])
    }

    pub fn cube(&self) -> &DyadicCube {
        &self.cube
    }

    pub fn m1(&self) -> u32 {
        self.m1
    }

    pub fn m2(&self) -> u32 {
        self.m2
    }

    pub fn rows(&self) -> usize {
        1 << (self.cube.dim() as u32 * self.m1)
    }

    pub fn cols(&self) -> usize {
        1 << (self.cube.dim() as u32 * self.m2)
    }

    pub fn block(&self) -> &[f64] {
        &self.block
    }

    pub fn entry(&self, r: usize, s: usize) -> f64 {
        self.block[r * self.cols() + s]
    }

    pub fn row_cube(&self, r: usize) -> DyadicCube {
        self.cube.subcube(self.m1, r as u64)
    }

    pub fn col_cube(&self, s: usize) -> DyadicCube {
        self.cube.subcube(self.m2, s as u64)
    }

    pub fn max_entry(&self) -> f64 {
        self.block.iter().fold(0.0f64, |a, b| a.max(b.abs()))
    }

    pub fn block_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows(), self.cols(), &self.block)
    }

    /// Operator norm of `S_Q` on `L²×L²`: `σ_max(block) · sqrt(|R||S|)`.
    pub fn norm(&self) -> f64 {
        let r = self.row_cube(0).measure();
        let s = self.col_cube(0).measure();
        dense_spectral_norm(&self.block_matrix()) * (r * s).sqrt()
    }

    /// Every row and every column sums to zero, within `tol · max|entry| · width`.
    pub fn is_cancellative(&self, tol: f64) -> bool {
        let scale = self.max_entry() * tol;
        let (rows, cols) = (self.rows(), self.cols());
        let rows_ok = (0..rows).all(|r| {
            let s: f64 = (0..cols).map(|c| self.entry(r, c)).sum();
            s.abs() <= scale * cols as f64
        });
        let cols_ok = (0..cols).all(|c| {
            let s: f64 = (0..rows).map(|r| self.entry(r, c)).sum();
            s.abs() <= scale * rows as f64
        });
        rows_ok && cols_ok
    }

    fn scaled(&self, s: f64) -> ShiftKernel {
        ShiftKernel {
            block: self.block.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    /// `Σ_{R,S} block[R,S] a[R] b[S]` for subcube integrals `a`, `b`.
    pub fn form_from_integrals(&self, a: &[f64], b: &[f64]) -> f64 {
        let cols = self.cols();
        let mut total = 0.0;
        for (r, ar) in a.iter().enumerate() {
            if *ar == 0.0 {
                continue;
            }
            let row = &self.block[r * cols..(r + 1) * cols];
            total += ar * row.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        }
        total
    }

    fn level_slice(&self, p: &Pyramid, m: u32, k: usize) -> Vec<f64> {
        let d = self.cube.dim() as u32;
        let count = 1usize << (d * m);
        let start = (self.cube.morton() as usize) << (d * m);
        let n = p.n();
        let level = p.level(self.cube.depth() + m);
        (0..count).map(|j| level[(start + j) * n + k]).collect()
    }

    /// Form on precomputed signed pyramids, coordinate `k`.
    pub fn form_on_pyramids(&self, p1: &Pyramid, p2: &Pyramid, k: usize) -> f64 {
        let a = self.level_slice(p1, self.m1, k);
        let b = self.level_slice(p2, self.m2, k);
        self.form_from_integrals(&a, &b)
    }
}

/// Exact signed value of `S_Q(f1, f2)`; for `n > 1` coordinates are summed (`S_Q ⊗ Id`).
pub fn component_form(k: &ShiftKernel, f1: &GridFunction, f2: &GridFunction) -> Result<f64> {
    f1.check_compatible(f2)?;
    f1.check_cube(k.cube())?;
    let depth = k.cube.depth() + k.m1.max(k.m2);
    if depth > f1.finest() {
        return Err(Error::DepthOverflow {
            depth,
            finest: f1.finest(),
        });
    }
    let mut total = 0.0;
    let a: Vec<Vec<f64>> = (0..k.rows()).map(|r| f1.integral(&k.row_cube(r))).collect::<Result<_>>()?;
    let b: Vec<Vec<f64>> = (0..k.cols()).map(|s| f2.integral(&k.col_cube(s))).collect::<Result<_>>()?;
    for c in 0..f1.n() {
        let ac: Vec<f64> = a.iter().map(|v| v[c]).collect();
        let bc: Vec<f64> = b.iter().map(|v| v[c]).collect();
        total += k.form_from_integrals(&ac, &bc);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum A2Strategy {
    /// No certificate: factor 1, bound infinite.
    None,
    ExactSmall,
    ScaleCount,
    HaarBessel,
}

impl A2Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            A2Strategy::None => "none",
            A2Strategy::ExactSmall => "exact-small",
            A2Strategy::ScaleCount => "scale-count",
            A2Strategy::HaarBessel => "haar-bessel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => A2Strategy::None,
            "exact-small" => A2Strategy::ExactSmall,
            "scale-count" => A2Strategy::ScaleCount,
            "haar-bessel" => A2Strategy::HaarBessel,
            _ => return None,
        })
    }
}

impl fmt::Display for A2Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Record of an A2 normalization: the kernels were divided by `factor`, after
/// which every subshift has bilinear norm at most `bound`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct A2Certificate {
    pub strategy: A2Strategy,
    pub factor: f64,
    pub bound: f64,
}

impl A2Certificate {
    pub fn uncertified() -> Self {
        A2Certificate {
            strategy: A2Strategy::None,
            factor: 1.0,
            bound: f64::INFINITY,
        }
    }

    pub fn is_certified(&self) -> bool {
        self.strategy != A2Strategy::None && self.bound <= 1.0 + 1e-9
    }
}

/// Which kernel cubes take part in a subshift.
#[derive(Clone, Copy)]
pub enum Selection<'a> {
    All,
    Cubes(&'a BTreeSet<DyadicCube>),
    /// Kernel cubes contained in the given cube (the lattice `𝒟(I)`).
    Within(DyadicCube),
    Predicate(&'a (dyn Fn(&DyadicCube) -> bool + Sync)),
}

impl Selection<'_> {
    pub fn admits(&self, q: &DyadicCube) -> bool {
        match self {
            Selection::All => true,
            Selection::Cubes(set) => set.contains(q),
            Selection::Within(i) => i.contains(q),
            Selection::Predicate(p) => p(q),
        }
    }
}

/// Finite cube → kernel map with common relative depths `(m1, m2)`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadicShift {
    dim: usize,
    finest: u32,
    m1: u32,
    m2: u32,
    kernels: BTreeMap<DyadicCube, ShiftKernel>,
    certificate: A2Certificate,
}

impl fmt::Debug for DyadicShift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DyadicShift")
            .field("dim", &self.dim)
            .field("finest", &self.finest)
            .field("m1", &self.m1)
            .field("m2", &self.m2)
            .field("kernels", &self.kernels.len())
            .field("certificate", &self.certificate)
            .finish()
    }
}

impl DyadicShift {
    pub fn new(dim: usize, finest: u32, m1: u32, m2: u32, kernels: Vec<ShiftKernel>) -> Result<Self> {
        check_grid(dim, finest)?;
        let mut map = BTreeMap::new();
        for k in kernels {
            if k.cube.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "kernel cube {:?} is not in dimension {dim}",
                    k.cube
                )));
            }
            if k.m1 != m1 || k.m2 != m2 {
                return Err(Error::InvalidParameter(format!(
                    "kernel on {:?} has depths ({}, {}), shift has ({m1}, {m2})",
                    k.cube, k.m1, k.m2
                )));
            }
            let depth = k.cube.depth() + m1.max(m2);
            if depth > finest {
                return Err(Error::DepthOverflow { depth, finest });
            }
            let cube = k.cube;
            if map.insert(cube, k).is_some() {
                return Err(Error::InvalidParameter(format!("duplicate kernel on {cube:?}")));
            }
        }
        Ok(DyadicShift {
            dim,
            finest,
            m1,
            m2,
            kernels: map,
            certificate: A2Certificate::uncertified(),
        })
    }

    pub fn empty(dim: usize, finest: u32, m1: u32, m2: u32) -> Result<Self> {
        Self::new(dim, finest, m1, m2, Vec::new())
    }

    /// Attaches a previously computed certificate (e.g. read back from a file).
    pub fn with_certificate(mut self, certificate: A2Certificate) -> Self {
        self.certificate = certificate;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn finest(&self) -> u32 {
        self.finest
    }

    pub fn m1(&self) -> u32 {
        self.m1
    }

    pub fn m2(&self) -> u32 {
        self.m2
    }

    /// Complexity `max{1, m1, m2}`.
    pub fn rho(&self) -> u32 {
        1.max(self.m1).max(self.m2)
    }

    pub fn certificate(&self) -> &A2Certificate {
        &self.certificate
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn kernels(&self) -> impl Iterator<Item = &ShiftKernel> {
        self.kernels.values()
    }

    pub fn kernel(&self, q: &DyadicCube) -> Option<&ShiftKernel> {
        self.kernels.get(q)
    }

    pub fn cubes(&self) -> impl Iterator<Item = &DyadicCube> {
        self.kernels.keys()
    }

    pub fn num_cells(&self) -> usize {
        1usize << (self.dim as u32 * self.finest)
    }

    /// Distinct kernel depths, ascending.
    pub fn depths(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.kernels.keys().map(|q| q.depth()).collect();
        set.into_iter().collect()
    }

    /// Subshift on the selected cubes (certificate carried over; subshifts inherit the A2 bound).
    pub fn restrict(&self, sel: Selection<'_>) -> DyadicShift {
        DyadicShift {
            kernels: self
                .kernels
                .iter()
                .filter(|(q, _)| sel.admits(q))
                .map(|(q, k)| (*q, k.clone()))
                .collect(),
            ..self.clone()
        }
    }

    /// All kernels divided by `factor ≥ 1`.
    pub fn scaled_down(&self, factor: f64) -> DyadicShift {
        DyadicShift {
            kernels: self
                .kernels
                .iter()
                .map(|(q, k)| (*q, k.scaled(1.0 / factor)))
                .collect(),
            ..self.clone()
        }
    }

    fn check_function(&self, f: &GridFunction) -> Result<()> {
        if f.dim() != self.dim || f.finest() != self.finest {
            return Err(Error::DimensionMismatch(format!(
                "function grid (d={}, L={}) differs from shift grid (d={}, L={})",
                f.dim(),
                f.finest(),
                self.dim,
                self.finest
            )));
        }
        Ok(())
    }

    /// `Σ_{Q selected} S_Q(f1, f2)`, summed over coordinates for `n > 1`.
    pub fn form(&self, f1: &GridFunction, f2: &GridFunction, sel: Selection<'_>) -> Result<f64> {
        self.check_function(f1)?;
        f1.check_compatible(f2)?;
        let prepared = PreparedPair::new(f1, f2)?;
        Ok(self.form_prepared(&prepared, sel))
    }

    pub fn form_prepared(&self, p: &PreparedPair, sel: Selection<'_>) -> f64 {
        let mut total = 0.0;
        for k in self.kernels.values().filter(|k| sel.admits(&k.cube)) {
            for c in 0..p.n {
                total += k.form_on_pyramids(&p.p1, &p.p2, c);
            }
        }
        total
    }

    /// Per-kernel values `S_Q(f1, f2)` in cube order.
    pub fn component_values(&self, p: &PreparedPair) -> Vec<(DyadicCube, f64)> {
        self.kernels
            .values()
            .map(|k| {
                let v = (0..p.n).map(|c| k.form_on_pyramids(&p.p1, &p.p2, c)).sum();
                (k.cube, v)
            })
            .collect()
    }

    /// Cell-basis matrix operator of the selected subshift: `S(f1, f2) = x1^T M x2`
    /// with `x[c] = f(c) sqrt(|cell|)`.
    pub fn operator<'a>(&'a self, sel: Selection<'_>) -> ShiftOperator<'a> {
        ShiftOperator {
            dim: self.dim,
            finest: self.finest,
            kernels: self.kernels.values().filter(|k| sel.admits(&k.cube)).collect(),
        }
    }

    /// Dense cell-basis matrix (for oracles).
    pub fn dense_matrix(&self, sel: Selection<'_>) -> Result<DMatrix<f64>> {
        let cells = self.num_cells();
        if cells > ORACLE_CELL_LIMIT {
            return Err(Error::SizeOverflow {
                size: cells,
                limit: ORACLE_CELL_LIMIT,
            });
        }
        let cell = (-((self.dim as u32 * self.finest) as f64)).exp2();
        let mut m = DMatrix::zeros(cells, cells);
        for k in self.kernels.values().filter(|k| sel.admits(&k.cube)) {
            for r in 0..k.rows() {
                for a in k.row_cube(r).cell_range(self.finest) {
                    for s in 0..k.cols() {
                        let v = k.entry(r, s) * cell;
                        if v == 0.0 {
                            continue;
                        }
                        for b in k.col_cube(s).cell_range(self.finest) {
                            m[(a, b)] += v;
                        }
                    }
                }
            }
        }
        Ok(m)
    }
}

/// Signed pyramids of a pair of functions, reused across many shifts.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    p1: Pyramid,
    p2: Pyramid,
    n: usize,
}

impl PreparedPair {
    pub fn new(f1: &GridFunction, f2: &GridFunction) -> Result<Self> {
        f1.check_compatible(f2)?;
        Ok(PreparedPair {
            p1: f1.signed_pyramid(),
            p2: f2.signed_pyramid(),
            n: f1.n(),
        })
    }
}

/// Matrix-free operator of a (sub)shift in the orthonormal cell basis.
pub struct ShiftOperator<'a> {
    dim: usize,
    finest: u32,
    kernels: Vec<&'a ShiftKernel>,
}

impl ShiftOperator<'_> {
    fn run(&self, x: &[f64], y: &mut [f64], transpose: bool) {
        let d = self.dim as u32;
        let levels = level_sums(self.dim, self.finest, x);
        let mut acc: Vec<Vec<f64>> = levels.iter().map(|l| vec![0.0; l.len()]).collect();
        let cell = (-((d * self.finest) as f64)).exp2();
        for k in &self.kernels {
            let (m_in, m_out) = if transpose { (k.m1, k.m2) } else { (k.m2, k.m1) };
            let depth = k.cube.depth();
            let in_start = (k.cube.morton() << (d * m_in)) as usize;
            let in_len = 1usize << (d * m_in);
            let out_start = (k.cube.morton() << (d * m_out)) as usize;
            let input = &levels[(depth + m_in) as usize][in_start..in_start + in_len];
            let out = &mut acc[(depth + m_out) as usize];
            let cols = k.cols();
            if transpose {
                for (r, xr) in input.iter().enumerate() {
                    if *xr == 0.0 {
                        continue;
                    }
                    let row = &k.block[r * cols..(r + 1) * cols];
                    for (s, v) in row.iter().enumerate() {
                        out[out_start + s] += v * xr * cell;
                    }
                }
            } else {
                for r in 0..k.rows() {
                    let row = &k.block[r * cols..(r + 1) * cols];
                    let v: f64 = row.iter().zip(input).map(|(a, b)| a * b).sum();
                    out[out_start + r] += v * cell;
                }
            }
        }
        let fan = 1usize << d;
        for depth in 0..self.finest as usize {
            let (upper, lower) = acc.split_at_mut(depth + 1);
            let parent = &upper[depth];
            let child = &mut lower[0];
            for (p, v) in parent.iter().enumerate() {
                if *v != 0.0 {
                    for c in 0..fan {
                        child[p * fan + c] += v;
                    }
                }
            }
        }
        y.copy_from_slice(&acc[self.finest as usize]);
    }
}

impl LinearOperator for ShiftOperator<'_> {
    fn rows(&self) -> usize {
        1 << (self.dim as u32 * self.finest)
    }

    fn cols(&self) -> usize {
        self.rows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.run(x, y, false);
    }

    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        self.run(x, y, true);
    }
}

/// Sums of `x` over every cube, level by level (`levels[depth][morton]`).
pub(crate) fn level_sums(dim: usize, finest: u32, x: &[f64]) -> Vec<Vec<f64>> {
    let fan = 1usize << dim;
    let mut levels = vec![x.to_vec()];
    for _ in 0..finest {
        let below = levels.last().unwrap();
        let up: Vec<f64> = below.chunks(fan).map(|c| c.iter().sum()).collect();
        levels.push(up);
    }
    levels.reverse();
    levels
}

/// Largest singular value of the selected subshift's cell-basis matrix
/// (power iteration to relative tolerance `1e-9`, dense fallback).
pub fn subshift_norm_oracle(shift: &DyadicShift, sel: Selection<'_>) -> Result<NormEstimate> {
    let cells = shift.num_cells();
    if cells > ORACLE_CELL_LIMIT {
        return Err(Error::SizeOverflow {
            size: cells,
            limit: ORACLE_CELL_LIMIT,
        });
    }
    let op = shift.operator(sel);
    spectral_norm(&op, &PowerConfig::default())
}

/// Norms of every nonempty subcollection, indexed by bit mask over the kernel cubes in order.
pub fn all_subshift_norms(shift: &DyadicShift, limit: usize) -> Result<Vec<(u64, f64)>> {
    let cubes: Vec<DyadicCube> = shift.cubes().copied().collect();
    let count = cubes.len();
    if count > limit || count > 20 {
        return Err(Error::TooManyKernels {
            count,
            limit: limit.min(20),
        });
    }
    let masks: Vec<u64> = (1..(1u64 << count)).collect();
    masks
        .into_par_iter()
        .map(|mask| {
            let set: BTreeSet<DyadicCube> = cubes
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, q)| *q)
                .collect();
            subshift_norm_oracle(shift, Selection::Cubes(&set)).map(|e| (mask, e.value))
        })
        .collect()
}

/// `‖Σ_Q (E_{Q,m} − E_Q)‖` over the kernel cubes: the Bessel constant of the
/// mean-zero block system at relative depth `m`.
fn bessel_constant(shift: &DyadicShift, m: u32) -> Result<f64> {
    if shift.is_empty() || m == 0 {
        return Ok(0.0);
    }
    let op = ProjectionSum {
        dim: shift.dim,
        finest: shift.finest,
        m,
        cubes: shift.cubes().copied().collect(),
    };
    Ok(spectral_norm(&op, &PowerConfig::default())?.value)
}

struct ProjectionSum {
    dim: usize,
    finest: u32,
    m: u32,
    cubes: Vec<DyadicCube>,
}

impl LinearOperator for ProjectionSum {
    fn rows(&self) -> usize {
        1 << (self.dim as u32 * self.finest)
    }

    fn cols(&self) -> usize {
        self.rows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let d = self.dim as u32;
        let levels = level_sums(self.dim, self.finest, x);
        let mut acc: Vec<Vec<f64>> = levels.iter().map(|l| vec![0.0; l.len()]).collect();
        for q in &self.cubes {
            let depth = q.depth() as usize;
            let code = q.morton() as usize;
            let sub = depth + self.m as usize;
            let n_sub = 1usize << (d * self.m);
            let sub_cells = 1usize << (d * (self.finest - sub as u32));
            let q_cells = sub_cells * n_sub;
            acc[depth][code] -= levels[depth][code] / q_cells as f64;
            for j in 0..n_sub {
                let c = code * n_sub + j;
                acc[sub][c] += levels[sub][c] / sub_cells as f64;
            }
        }
        let fan = 1usize << d;
        for depth in 0..self.finest as usize {
            let (upper, lower) = acc.split_at_mut(depth + 1);
            for (p, v) in upper[depth].iter().enumerate() {
                if *v != 0.0 {
                    for c in 0..fan {
                        lower[0][p * fan + c] += v;
                    }
                }
            }
        }
        y.copy_from_slice(&acc[self.finest as usize]);
    }

    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        self.apply(x, y);
    }
}

/// Rescales the shift so that every subshift has bilinear norm at most one.
///
/// The applied factor is `max(1, computed)`, so a shift that already satisfies the
/// bound is left unchanged and the size bound on entries is preserved.
pub fn normalize_a2(shift: &DyadicShift, strategy: A2Strategy, exact_limit: usize) -> Result<DyadicShift> {
    let raw = match strategy {
        A2Strategy::None => return Ok(shift.clone().with_certificate(A2Certificate::uncertified())),
        A2Strategy::ExactSmall => all_subshift_norms(shift, exact_limit)?
            .into_iter()
            .fold(0.0f64, |a, (_, v)| a.max(v)),
        A2Strategy::ScaleCount => {
            let mut per_depth: BTreeMap<u32, f64> = BTreeMap::new();
            for k in shift.kernels() {
                let e = per_depth.entry(k.cube.depth()).or_insert(0.0);
                *e = e.max(k.norm());
            }
            let bound: f64 = per_depth.values().sum();
            let factor = (per_depth.len() as f64).max(1.0);
            return Ok(shift.scaled_down(factor).with_certificate(A2Certificate {
                strategy,
                factor,
                bound: bound / factor,
            }));
        }
        A2Strategy::HaarBessel => {
            if let Some(k) = shift.kernels().find(|k| !k.is_cancellative(1e-12)) {
                return Err(Error::NotCancellative(format!(
                    "kernel on {:?} has rows or columns with nonzero sum",
                    k.cube
                )));
            }
            let b1 = bessel_constant(shift, shift.m1)?;
            let b2 = bessel_constant(shift, shift.m2)?;
            let max_norm = shift.kernels().map(|k| k.norm()).fold(0.0f64, f64::max);
            max_norm * (b1 * b2).sqrt()
        }
    };
    let factor = raw.max(1.0);
    Ok(shift.scaled_down(factor).with_certificate(A2Certificate {
        strategy,
        factor,
        bound: raw / factor,
    }))
}

/// Parameters of the random shift generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomShiftSpec {
    pub dim: usize,
    pub finest: u32,
    pub rho: u32,
    /// Probability that an admissible cube carries a kernel.
    pub density: f64,
    /// Double-center every block (mean-zero rows and columns).
    pub cancellative: bool,
    /// Normalization; `None` picks exact-small for at most 8 kernels on small grids, then
    /// haar-bessel for cancellative shifts and scale-count otherwise.
    pub strategy: Option<A2Strategy>,
}

impl RandomShiftSpec {
    pub fn new(dim: usize, finest: u32, rho: u32, density: f64) -> Self {
        RandomShiftSpec {
            dim,
            finest,
            rho,
            density,
            cancellative: false,
            strategy: None,
        }
    }
}

/// Seeded random shift with complexity exactly `rho`, normalized for A2.
pub fn random_shift(seed: u64, spec: &RandomShiftSpec) -> Result<DyadicShift> {
    check_grid(spec.dim, spec.finest)?;
    let rho = spec.rho;
    if rho < 1 || rho > spec.finest {
        return Err(Error::InvalidParameter(format!(
            "complexity {rho} must lie in 1..={}",
            spec.finest
        )));
    }
    if !(0.0..=1.0).contains(&spec.density) {
        return Err(Error::InvalidParameter(format!(
            "density {} not in [0, 1]",
            spec.density
        )));
    }
    if spec.dim as u32 * 2 * rho > 16 {
        return Err(Error::SizeOverflow {
            size: 1usize << (spec.dim as u32 * 2 * rho),
            limit: MAX_BLOCK_ENTRIES,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let low = if spec.cancellative { 1 } else { 0 };
    let other = rng.gen_range(low..=rho);
    let (m1, m2) = if rng.gen_bool(0.5) { (rho, other) } else { (other, rho) };
    let mut kernels = Vec::new();
    for depth in 0..=(spec.finest - m1.max(m2)) {
        for code in 0..(1u64 << (spec.dim as u32 * depth)) {
            if !rng.gen_bool(spec.density) {
                continue;
            }
            let cube = DyadicCube::from_morton(spec.dim, depth, code);
            let bound = 1.0 / cube.measure();
            let rows = 1usize << (spec.dim as u32 * m1);
            let cols = 1usize << (spec.dim as u32 * m2);
            let block = if spec.cancellative {
                cancellative_block(&mut rng, rows, cols, bound)
            } else {
                (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect()
            };
            kernels.push(ShiftKernel::new(cube, m1, m2, block)?);
        }
    }
    let shift = DyadicShift::new(spec.dim, spec.finest, m1, m2, kernels)?;
    let strategy = spec.strategy.unwrap_or(if shift.len() <= 8 && shift.num_cells() <= EXACT_SMALL_CELLS {
        A2Strategy::ExactSmall
    } else if spec.cancellative {
        A2Strategy::HaarBessel
    } else {
        A2Strategy::ScaleCount
    });
    normalize_a2(&shift, strategy, EXACT_SMALL_LIMIT)
}

/// Random block with mean-zero rows and columns, rescaled into the A1 bound.
///
/// Centering runs twice: when the raw block nearly cancels, the first pass
/// leaves roundoff at the scale of the raw entries and the second removes it.
fn cancellative_block(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Vec<f64> {
    let mut block: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    double_center(&mut block, rows, cols);
    double_center(&mut block, rows, cols);
    let max = block.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if max > bound {
        let s = bound / max;
        block.iter_mut().for_each(|v| *v = (*v * s).clamp(-bound, bound));
    }
    block
}

fn double_center(block: &mut [f64], rows: usize, cols: usize) {
    let row_means: Vec<f64> = (0..rows)
        .map(|r| block[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64)
        .collect();
    let col_means: Vec<f64> = (0..cols)
        .map(|c| (0..rows).map(|r| block[r * cols + c]).sum::<f64>() / rows as f64)
        .collect();
    let grand = row_means.iter().sum::<f64>() / rows as f64;
    for r in 0..rows {
        for c in 0..cols {
            block[r * cols + c] -= row_means[r] + col_means[c] - grand;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn root1() -> DyadicCube {
        DyadicCube::root(1)
    }

    #[test]
    fn constant_block_on_indicator() {
        let k = ShiftKernel::constant(root1(), 1, 1, 1.0).unwrap();
        let one = GridFunction::constant(1, 3, &[1.0]).unwrap();
        assert!((component_form(&k, &one, &one).unwrap() - 1.0).abs() < 1e-15);
        let q = DyadicCube::new(1, 1, &[1]).unwrap();
        let k = ShiftKernel::constant(q, 0, 0, 2.0).unwrap();
        let ind = GridFunction::indicator(1, 3, &q, 1.0).unwrap();
        assert!((component_form(&k, &ind, &ind).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mean_zero_on_rows_kills_form() {
        let k = ShiftKernel::new(root1(), 1, 1, vec![0.3, -0.2, 0.9, 1.0]).unwrap();
        let f1 = GridFunction::scalar(1, 2, vec![1.0, -1.0, 2.0, -2.0]).unwrap();
        let f2 = GridFunction::scalar(1, 2, vec![0.5, 4.0, -1.0, 3.0]).unwrap();
        assert_eq!(component_form(&k, &f1, &f2).unwrap(), 0.0);
    }

    #[test]
    fn signed_block_example() {
        let k = ShiftKernel::new(root1(), 1, 1, vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let f = GridFunction::scalar(1, 1, vec![1.0, 0.0]).unwrap();
        assert!((component_form(&k, &f, &f).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn a1_is_enforced() {
        let q = DyadicCube::new(1, 2, &[0]).unwrap();
        assert!(ShiftKernel::constant(q, 0, 0, 4.0).is_ok());
        assert!(matches!(
            ShiftKernel::constant(q, 0, 0, 4.0000001),
            Err(Error::AxiomViolation { axiom: "A1", .. })
        ));
        assert!(DyadicShift::new(1, 3, 1, 1, vec![ShiftKernel::constant(q, 1, 1, 1.0).unwrap()]).is_ok());
        let too_deep = DyadicCube::new(1, 3, &[1]).unwrap();
        assert!(matches!(
            DyadicShift::new(1, 3, 1, 1, vec![ShiftKernel::constant(too_deep, 1, 1, 1.0).unwrap()]),
            Err(Error::DepthOverflow { .. })
        ));
    }

    #[test]
    fn selection_forms() {
        let spec = RandomShiftSpec::new(1, 6, 2, 0.5);
        let s = random_shift(11, &spec).unwrap();
        let f1 = GridFunction::from_fn(1, 6, 1, |c| vec![(c.center()[0] * 9.0).sin()]).unwrap();
        let f2 = GridFunction::from_fn(1, 6, 1, |c| vec![c.center()[0] - 0.4]).unwrap();
        let empty = BTreeSet::new();
        assert_eq!(s.form(&f1, &f2, Selection::Cubes(&empty)).unwrap(), 0.0);
        let total = s.form(&f1, &f2, Selection::All).unwrap();
        let mut parts = 0.0;
        for k in s.kernels() {
            let single: BTreeSet<_> = [*k.cube()].into();
            let v = s.form(&f1, &f2, Selection::Cubes(&single)).unwrap();
            assert!((v - component_form(k, &f1, &f2).unwrap()).abs() < 1e-14);
            parts += v;
        }
        assert!((total - parts).abs() <= 1e-12 * (1.0 + total.abs()));
    }

    #[test]
    fn single_saturated_kernel_has_unit_norm() {
        let s = DyadicShift::new(1, 1, 0, 0, vec![ShiftKernel::constant(root1(), 0, 0, 1.0).unwrap()]).unwrap();
        let n = subshift_norm_oracle(&s, Selection::All).unwrap().value;
        assert!((n - 1.0).abs() < 1e-12);
        let norm = normalize_a2(&s, A2Strategy::ExactSmall, 12).unwrap();
        assert_eq!(norm.certificate().factor, 1.0);
    }

    #[test]
    fn two_depths_scale_count() {
        let a = ShiftKernel::constant(root1(), 0, 0, 1.0).unwrap();
        let q = DyadicCube::new(1, 1, &[0]).unwrap();
        let b = ShiftKernel::constant(q, 0, 0, 2.0).unwrap();
        let s = DyadicShift::new(1, 2, 0, 0, vec![a, b]).unwrap();
        let sc = normalize_a2(&s, A2Strategy::ScaleCount, 12).unwrap();
        assert_eq!(sc.certificate().factor, 2.0);
        let ex = normalize_a2(&s, A2Strategy::ExactSmall, 12).unwrap();
        assert!(ex.certificate().factor <= sc.certificate().factor);
    }

    #[test]
    fn zero_and_rank_one_norms() {
        let s = DyadicShift::empty(1, 4, 1, 1).unwrap();
        assert_eq!(subshift_norm_oracle(&s, Selection::All).unwrap().value, 0.0);
        let q = DyadicCube::new(1, 1, &[1]).unwrap();
        let k = ShiftKernel::rank_one(q, 2, 1, 1.5, 3, 0).unwrap();
        let r = k.row_cube(3).measure();
        let c = k.col_cube(0).measure();
        let s = DyadicShift::new(1, 4, 2, 1, vec![k]).unwrap();
        let n = subshift_norm_oracle(&s, Selection::All).unwrap().value;
        assert!((n - 1.5 * (r * c).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn exact_small_over_limit() {
        let spec = RandomShiftSpec {
            strategy: Some(A2Strategy::None),
            ..RandomShiftSpec::new(1, 5, 1, 1.0)
        };
        let s = random_shift(3, &spec).unwrap();
        assert!(s.len() > 12);
        assert!(matches!(
            normalize_a2(&s, A2Strategy::ExactSmall, 12),
            Err(Error::TooManyKernels { .. })
        ));
    }

    #[test]
    fn density_zero_and_determinism() {
        let spec = RandomShiftSpec::new(2, 4, 2, 0.0);
        let s = random_shift(5, &spec).unwrap();
        assert!(s.is_empty());
        let spec = RandomShiftSpec::new(2, 4, 2, 0.4);
        assert_eq!(random_shift(9, &spec).unwrap(), random_shift(9, &spec).unwrap());
        assert_eq!(random_shift(9, &spec).unwrap().rho(), 2);
    }

    #[test]
    fn haar_bessel_requires_cancellation() {
        let spec = RandomShiftSpec {
            strategy: Some(A2Strategy::None),
            ..RandomShiftSpec::new(1, 6, 2, 0.3)
        };
        let s = random_shift(1, &spec).unwrap();
        assert!(matches!(
            normalize_a2(&s, A2Strategy::HaarBessel, 12),
            Err(Error::NotCancellative(_))
        ));
        let spec = RandomShiftSpec {
            cancellative: true,
            strategy: Some(A2Strategy::HaarBessel),
            ..RandomShiftSpec::new(1, 6, 2, 0.3)
        };
        let s = random_shift(1, &spec).unwrap();
        assert!(s.kernels().all(|k| k.is_cancellative(1e-12)));
        assert!(s.certificate().bound <= 1.0);
    }

    fn brute_form(s: &DyadicShift, f1: &GridFunction, f2: &GridFunction) -> f64 {
        let m = s.dense_matrix(Selection::All).unwrap();
        let sc = f1.cell_measure().sqrt();
        let x1: Vec<f64> = f1.values().iter().map(|v| v * sc).collect();
        let x2: Vec<f64> = f2.values().iter().map(|v| v * sc).collect();
        let mut t = 0.0;
        for a in 0..x1.len() {
            for b in 0..x2.len() {
                t += x1[a] * m[(a, b)] * x2[b];
            }
        }
        t
    }

    fn random_fn(seed: u64, dim: usize, finest: u32) -> GridFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GridFunction::from_fn(dim, finest, 1, |_| vec![rng.gen_range(-1.0..1.0)]).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn generated_shifts_satisfy_a1(seed in any::<u64>(), rho in 1u32..4, dim in 1usize..3, canc in any::<bool>()) {
            let spec = RandomShiftSpec { cancellative: canc, ..RandomShiftSpec::new(dim, 4, rho, 0.5) };
            let s = random_shift(seed, &spec).unwrap();
            prop_assert_eq!(s.rho(), rho);
            for k in s.kernels() {
                prop_assert!(k.max_entry() <= 1.0 / k.cube().measure());
                prop_assert!(ShiftKernel::new(*k.cube(), k.m1(), k.m2(), k.block().to_vec()).is_ok());
                if canc {
                    prop_assert!(k.is_cancellative(1e-12));
                }
            }
            prop_assert!(s.certificate().bound <= 1.0 + 1e-9);
        }

        #[test]
        fn bilinearity(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let spec = RandomShiftSpec::new(1, 5, 2, 0.6);
            let s = random_shift(seed, &spec).unwrap();
            let f = random_fn(seed ^ 1, 1, 5);
            let g = random_fn(seed ^ 2, 1, 5);
            let h = random_fn(seed ^ 3, 1, 5);
            let lhs = s.form(&f.scale(a).add(&g.scale(b)).unwrap(), &h, Selection::All).unwrap();
            let rhs = a * s.form(&f, &h, Selection::All).unwrap() + b * s.form(&g, &h, Selection::All).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())));
            let lhs = s.form(&h, &f.scale(a).add(&g.scale(b)).unwrap(), Selection::All).unwrap();
            let rhs = a * s.form(&h, &f, Selection::All).unwrap() + b * s.form(&h, &g, Selection::All).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())));
        }

        #[test]
        fn operator_matches_dense_and_form(seed in any::<u64>(), dim in 1usize..3, rho in 1u32..3) {
            let finest = if dim == 1 { 5 } else { 3 };
            let spec = RandomShiftSpec::new(dim, finest, rho, 0.4);
            let s = random_shift(seed, &spec).unwrap();
            let f1 = random_fn(seed ^ 5, dim, finest);
            let f2 = random_fn(seed ^ 6, dim, finest);
            let direct = s.form(&f1, &f2, Selection::All).unwrap();
            prop_assert!((direct - brute_form(&s, &f1, &f2)).abs() <= 1e-12 * (1.0 + direct.abs()));
            let dense = s.dense_matrix(Selection::All).unwrap();
            let op = s.operator(Selection::All);
            prop_assert!((op.to_dense() - &dense).amax() <= 1e-12);
            let x: Vec<f64> = f1.values().to_vec();
            let mut y1 = vec![0.0; x.len()];
            op.apply_transpose(&x, &mut y1);
            let y2 = dense.transpose() * nalgebra::DVector::from_column_slice(&x);
            for (a, b) in y1.iter().zip(y2.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn oracle_matches_dense_svd(seed in any::<u64>()) {
            let spec = RandomShiftSpec { strategy: Some(A2Strategy::None), ..RandomShiftSpec::new(1, 5, 2, 0.3) };
            let s = random_shift(seed, &spec).unwrap();
            let s = s.restrict(Selection::Predicate(&|q: &DyadicCube| q.depth() <= 2));
            prop_assume!(s.len() <= 6);
            let est = subshift_norm_oracle(&s, Selection::All).unwrap().value;
            let exact = dense_spectral_norm(&s.dense_matrix(Selection::All).unwrap());
            prop_assert!((est - exact).abs() <= 1e-8 * exact.max(1e-300));
        }

        #[test]
        fn a2_holds_after_normalization(seed in any::<u64>(), canc in any::<bool>()) {
            let spec = RandomShiftSpec { cancellative: canc, ..RandomShiftSpec::new(1, 6, 2, 0.3) };
            let s = random_shift(seed, &spec).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cubes: Vec<DyadicCube> = s.cubes().copied().collect();
            for t in 0..4u64 {
                let sub: BTreeSet<DyadicCube> = cubes.iter().filter(|_| rng.gen_bool(0.5)).copied().collect();
                let f1 = random_fn(seed ^ (10 + t), 1, 6);
                let f2 = random_fn(seed ^ (20 + t), 1, 6);
                let v = s.form(&f1, &f2, Selection::Cubes(&sub)).unwrap();
                prop_assert!(v.abs() <= (1.0 + 1e-9) * f1.norms().l2 * f2.norms().l2);
            }
        }

        #[test]
        fn exact_factor_never_exceeds_scale_count(seed in any::<u64>()) {
            let spec = RandomShiftSpec { strategy: Some(A2Strategy::None), ..RandomShiftSpec::new(1, 5, 1, 0.2) };
            let s = random_shift(seed, &spec).unwrap();
            prop_assume!(s.len() <= 8);
            let ex = normalize_a2(&s, A2Strategy::ExactSmall, 12).unwrap();
            let sc = normalize_a2(&s, A2Strategy::ScaleCount, 12).unwrap();
            prop_assert!(ex.certificate().factor <= sc.certificate().factor + 1e-12);
        }

        #[test]
        fn haar_bessel_is_valid(seed in any::<u64>()) {
            let spec = RandomShiftSpec {
                cancellative: true,
                strategy: Some(A2Strategy::None),
                ..RandomShiftSpec::new(1, 5, 2, 0.25)
            };
            let s = random_shift(seed, &spec).unwrap();
            prop_assume!(!s.is_empty() && s.len() <= 8);
            let hb = normalize_a2(&s, A2Strategy::HaarBessel, 12).unwrap();
            let worst = all_subshift_norms(&hb, 12).unwrap().into_iter().fold(0.0f64, |a, (_, v)| a.max(v));
            prop_assert!(worst <= hb.certificate().bound * (1.0 + 1e-8) + 1e-15);
        }
    }
}
