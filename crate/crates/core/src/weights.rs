//! Matrix weights, the `A_2` characteristic and weighted norms of shift extensions.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convex::{minkowski_product, Zonotope};
use crate::dyadic::{check_grid, DyadicCube, GridFunction, Pyramid};
use crate::error::{Error, Result};
use crate::linalg::{spd_function, spd_inv_sqrt, spd_sqrt, spectral_norm, sym_eigen, LinearOperator, NormEstimate, PowerConfig};
use crate::numeric::{log_log_slope, CompensatedSum};
use crate::shift::{DyadicShift, Selection, ShiftOperator};
use crate::sparse::SparseCollection;

/// Largest `n × cells` for which weighted operator norms are computed.
pub const WEIGHTED_SIZE_LIMIT: usize = 8192;

/// Relative tolerance of the weighted power iteration.
pub const WEIGHTED_NORM_TOL: f64 = 1e-8;

/// Cellwise symmetric positive-definite `n × n` matrices on the finest grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixWeight {
    dim: usize,
    finest: u32,
    n: usize,
    /// Row-major cell matrices, cell-major.
    mats: Vec<f64>,
}

fn cell_matrix(n: usize, m: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, m)
}

fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    (0..n * n).map(|k| m[(k / n, k % n)]).collect()
}

impl MatrixWeight {
    pub fn new(dim: usize, finest: u32, n: usize, mats: Vec<f64>) -> Result<Self> {
        check_grid(dim, finest)?;
        if n == 0 {
            return Err(Error::InvalidParameter("weights need n ≥ 1".into()));
        }
        let cells = 1usize << (dim as u32 * finest);
        if mats.len() != cells * n * n {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for {cells} cells of {n}x{n} matrices",
                mats.len()
            )));
        }
        for (c, m) in mats.chunks(n * n).enumerate() {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("non-finite weight at cell {c}")));
            }
            for i in 0..n {
                for j in 0..i {
                    let (a, b) = (m[i * n + j], m[j * n + i]);
                    if (a - b).abs() > 1e-12 * (a.abs() + b.abs()).max(f64::MIN_POSITIVE) {
                        return Err(Error::InvalidParameter(format!("weight at cell {c} is not symmetric")));
                    }
                }
            }
            let (vals, _) = sym_eigen(&cell_matrix(n, m));
            let trace: f64 = vals.iter().sum();
            if !(vals[0] > 1e-12 * trace) {
                return Err(Error::Degenerate(format!(
                    "weight at cell {c} has eigenvalue {:e} below 1e-12 of its trace",
                    vals[0]
                )));
            }
        }
        Ok(MatrixWeight { dim, finest, n, mats })
    }

    pub fn identity(dim: usize, finest: u32, n: usize) -> Result<Self> {
        Self::constant(dim, finest, &DMatrix::identity(n, n))
    }

    pub fn constant(dim: usize, finest: u32, m: &DMatrix<f64>) -> Result<Self> {
        check_grid(dim, finest)?;
        let cells = 1usize << (dim as u32 * finest);
        let flat = flatten(m);
        Self::new(dim, finest, m.nrows(), flat.repeat(cells))
    }

    pub fn from_fn(dim: usize, finest: u32, n: usize, mut f: impl FnMut(&DyadicCube) -> DMatrix<f64>) -> Result<Self> {
        check_grid(dim, finest)?;
        let mut mats = Vec::with_capacity((1usize << (dim as u32 * finest)) * n * n);
        for code in 0..1u64 << (dim as u32 * finest) {
            let m = f(&DyadicCube::from_morton(dim, finest, code));
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::DimensionMismatch(format!("expected {n}x{n} cell matrices")));
            }
            mats.extend(flatten(&m));
        }
        Self::new(dim, finest, n, mats)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn finest(&self) -> u32 {
        self.finest
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_cells(&self) -> usize {
        self.mats.len() / (self.n * self.n)
    }

    pub fn cell(&self, c: usize) -> DMatrix<f64> {
        let w = self.n * self.n;
        cell_matrix(self.n, &self.mats[c * w..(c + 1) * w])
    }

    /// Every cell carries the same matrix.
    pub fn is_constant(&self) -> bool {
        let w = self.n * self.n;
        self.mats.chunks(w).all(|m| m == &self.mats[..w])
    }

    fn map_cells(&self, f: impl Fn(&DMatrix<f64>) -> Result<DMatrix<f64>>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.mats.len());
        for c in 0..self.num_cells() {
            let m = f(&self.cell(c))?;
            let m = (&m + m.transpose()) * 0.5;
            out.extend(flatten(&m));
        }
        Ok(out)
    }

    /// `W^{-1}`.
    pub fn inverse(&self) -> Result<MatrixWeight> {
        let mats = self.map_cells(|m| spd_function(m, |v| 1.0 / v))?;
        MatrixWeight::new(self.dim, self.finest, self.n, mats)
    }

    pub fn scaled(&self, c: f64) -> Result<MatrixWeight> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidParameter(format!("weight scale {c} must be positive")));
        }
        MatrixWeight::new(self.dim, self.finest, self.n, self.mats.iter().map(|v| v * c).collect())
    }

    fn pyramid(&self) -> Pyramid {
        let w = self.n * self.n;
        Pyramid::build(self.dim, self.finest, w, |c, out| out.copy_from_slice(&self.mats[c * w..(c + 1) * w]))
    }

    /// `⟨W⟩_Q`.
    pub fn average(&self, q: &DyadicCube) -> Result<DMatrix<f64>> {
        crate::dyadic::check_cube(q, self.dim, self.finest)?;
        let p = self.pyramid();
        Ok(cell_matrix(self.n, p.get(q)) / q.cell_count(self.finest) as f64)
    }

    fn check_function(&self, f: &GridFunction) -> Result<()> {
        if f.dim() != self.dim || f.finest() != self.finest || f.n() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "function on (d={}, L={}, n={}) against weight on (d={}, L={}, n={})",
                f.dim(),
                f.finest(),
                f.n(),
                self.dim,
                self.finest,
                self.n
            )));
        }
        Ok(())
    }

    /// Cellwise product `W(x) f(x)`.
    pub fn apply(&self, f: &GridFunction) -> Result<GridFunction> {
        self.check_function(f)?;
        let n = self.n;
        let mut out = Vec::with_capacity(f.values().len());
        for c in 0..f.num_cells() {
            let m = &self.mats[c * n * n..(c + 1) * n * n];
            let v = f.value(c);
            for i in 0..n {
                out.push((0..n).map(|j| m[i * n + j] * v[j]).sum());
            }
        }
        GridFunction::new(f.dim(), f.finest(), n, out)
    }
}

/// `[W]_{A_2}` with the cube attaining it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct A2Characteristic {
    pub value: f64,
    pub cube: DyadicCube,
}

/// `max_Q ‖⟨W⟩_Q^{1/2} ⟨W^{-1}⟩_Q^{1/2}‖²` over all dyadic cubes.
pub fn a2_characteristic(w: &MatrixWeight) -> Result<f64> {
    Ok(a2_characteristic_detailed(w)?.value)
}

pub fn a2_characteristic_detailed(w: &MatrixWeight) -> Result<A2Characteristic> {
    let inv = w.inverse()?;
    let (pw, pi) = (w.pyramid(), inv.pyramid());
    let n = w.n;
    let mut best = A2Characteristic {
        value: 0.0,
        cube: DyadicCube::root(w.dim),
    };
    for depth in 0..=w.finest {
        for k in 0..(1u64 << (w.dim as u32 * depth)) {
            let q = DyadicCube::from_morton(w.dim, depth, k);
            let a = cell_matrix(n, pw.get(&q));
            let b = cell_matrix(n, pi.get(&q));
            let sa = spd_sqrt(&a).map_err(|_| Error::Degenerate(format!("average of W on {q:?} is near-singular")))?;
            let sb = spd_sqrt(&b).map_err(|_| Error::Degenerate(format!("average of W^-1 on {q:?} is near-singular")))?;
            // Both averages carry the factor |Q| / cell; the product divides by its square.
            let scale = (q.cell_count(w.finest) as f64).powi(2);
            let m = &sa * &sb;
            let v = (m.transpose() * &m).symmetric_eigen().eigenvalues.max() / scale;
            if v > best.value {
                best = A2Characteristic { value: v, cube: q };
            }
        }
    }
    Ok(best)
}

/// `‖f‖_{L²(W)} = (∫ |W^{1/2} f|²)^{1/2}`.
pub fn weighted_norm(f: &GridFunction, w: &MatrixWeight) -> Result<f64> {
    w.check_function(f)?;
    let n = w.n;
    let mut s = CompensatedSum::default();
    for c in 0..f.num_cells() {
        let m = &w.mats[c * n * n..(c + 1) * n * n];
        let v = f.value(c);
        for i in 0..n {
            for j in 0..n {
                s.add(v[i] * m[i * n + j] * v[j]);
            }
        }
    }
    Ok((s.total().max(0.0) * f.cell_measure()).sqrt())
}

/// `W^{1/2} (T ⊗ Id) W^{-1/2}` on cell-major coefficient vectors.
struct WeightedShiftOperator<'a> {
    op: ShiftOperator<'a>,
    n: usize,
    cells: usize,
    sqrt: Vec<f64>,
    inv_sqrt: Vec<f64>,
}

impl WeightedShiftOperator<'_> {
    fn multiply(&self, mats: &[f64], x: &[f64], y: &mut [f64]) {
        let n = self.n;
        for c in 0..self.cells {
            let m = &mats[c * n * n..(c + 1) * n * n];
            for i in 0..n {
                y[c * n + i] = (0..n).map(|j| m[i * n + j] * x[c * n + j]).sum();
            }
        }
    }

    fn coordinatewise(&self, x: &[f64], y: &mut [f64], transpose: bool) {
        let n = self.n;
        let mut u = vec![0.0; self.cells];
        let mut v = vec![0.0; self.cells];
        for k in 0..n {
            for c in 0..self.cells {
                u[c] = x[c * n + k];
            }
            // `S(f1, f2) = x1ᵀ M x2`, so `T = Mᵀ` is the operator with `⟨T f1, f2⟩ = S(f1, f2)`.
            if transpose {
                self.op.apply(&u, &mut v);
            } else {
                self.op.apply_transpose(&u, &mut v);
            }
            for c in 0..self.cells {
                y[c * n + k] = v[c];
            }
        }
    }
}

impl LinearOperator for WeightedShiftOperator<'_> {
    fn rows(&self) -> usize {
        self.n * self.cells
    }

    fn cols(&self) -> usize {
        self.n * self.cells
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let mut u = vec![0.0; x.len()];
        let mut v = vec![0.0; x.len()];
        self.multiply(&self.inv_sqrt, x, &mut u);
        self.coordinatewise(&u, &mut v, false);
        self.multiply(&self.sqrt, &v, y);
    }

    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        let mut u = vec![0.0; x.len()];
        let mut v = vec![0.0; x.len()];
        self.multiply(&self.sqrt, x, &mut u);
        self.coordinatewise(&u, &mut v, true);
        self.multiply(&self.inv_sqrt, &v, y);
    }
}

/// `‖T ⊗ Id‖_{L²(W) → L²(W)}` for the operator of `shift`.
///
/// Constant weights commute with `T ⊗ Id`, so the value reduces to the scalar norm.
pub fn weighted_operator_norm(shift: &DyadicShift, w: &MatrixWeight) -> Result<NormEstimate> {
    if shift.dim() != w.dim || shift.finest() != w.finest {
        return Err(Error::DimensionMismatch("shift and weight live on different grids".into()));
    }
    let cells = w.num_cells();
    if w.n * cells > WEIGHTED_SIZE_LIMIT {
        return Err(Error::SizeOverflow {
            size: w.n * cells,
            limit: WEIGHTED_SIZE_LIMIT,
        });
    }
    let cfg = PowerConfig {
        tol: WEIGHTED_NORM_TOL,
        ..PowerConfig::default()
    };
    if w.is_constant() {
        return spectral_norm(&shift.operator(Selection::All), &cfg);
    }
    let op = WeightedShiftOperator {
        op: shift.operator(Selection::All),
        n: w.n,
        cells,
        sqrt: w.map_cells(spd_sqrt)?,
        inv_sqrt: w.map_cells(spd_inv_sqrt)?,
    };
    spectral_norm(&op, &cfg)
}

/// Packing of `A_{jQ} = |Q| ⟨V_j⟩_Q^{-1}` with `V_1 = W^{-1}`, `V_2 = W`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarlesonReport {
    /// `max_R |R|^{-1} Σ_{Q ⊂ R, Q ∈ 𝒮} ‖⟨V_j⟩^{1/2} A_{jQ} ⟨V_j⟩^{1/2}‖`.
    pub packing: f64,
    /// `max_Q ‖⟨V_j⟩^{1/2} A_{jQ} ⟨V_j⟩^{1/2} − |Q| Id‖ / |Q|`.
    pub collapse_error: f64,
    pub passed: bool,
}

pub fn carleson_packing(s: &SparseCollection, w: &MatrixWeight, j: usize) -> Result<CarlesonReport> {
    if s.dim() != w.dim || s.finest() != w.finest {
        return Err(Error::DimensionMismatch("collection and weight live on different grids".into()));
    }
    let v = match j {
        1 => w.inverse()?,
        2 => w.clone(),
        _ => return Err(Error::InvalidParameter(format!("weight index {j} must be 1 or 2"))),
    };
    let p = v.pyramid();
    let n = w.n;
    let mut terms = std::collections::BTreeMap::new();
    let mut collapse_error = 0.0f64;
    for q in s.cubes() {
        let avg = cell_matrix(n, p.get(q)) / q.cell_count(w.finest) as f64;
        let half = spd_sqrt(&avg)?;
        let a = spd_function(&avg, |x| 1.0 / x)? * q.measure();
        let m = &half * a * &half;
        let norm = crate::linalg::dense_spectral_norm(&m);
        let err = crate::linalg::dense_spectral_norm(&(m - DMatrix::identity(n, n) * q.measure())) / q.measure();
        collapse_error = collapse_error.max(err);
        terms.insert(*q, norm);
    }
    let mut packing = 0.0f64;
    for r in s.cubes() {
        let sum: f64 = terms.iter().filter(|(q, _)| r.contains(q)).map(|(_, v)| v).sum();
        packing = packing.max(sum / r.measure());
    }
    Ok(CarlesonReport {
        packing,
        collapse_error,
        passed: collapse_error <= 1e-10,
    })
}

/// Sparse-form side of the weighted estimate for a given pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReport {
    /// `Σ_Q |Q| ⟨V_1 f_1⟩_Q ⟨V_2 f_2⟩_Q`.
    pub sparse_form: f64,
    /// `Σ_Q |Q| |⟨V_j⟩_Q^{-1/2} F_{jQ}|²` for `j = 1, 2`.
    pub embedding: [f64; 2],
    /// `‖f_j‖²_{L²(V_j)}`.
    pub norms_sq: [f64; 2],
    pub characteristic: f64,
    /// `embedding_j / ([W]_{A_2} ‖f_j‖²)`, the observed embedding constant.
    pub embedding_constant: [f64; 2],
    /// `sparse_form / ([W]^{1/2} (embedding_1 embedding_2)^{1/2})`; at most one.
    pub reduction_ratio: f64,
    /// `max_Q |⟨V_1 f_1⟩_Q⟨V_2 f_2⟩_Q − F_{1Q}·F_{2Q}|` relative to the product.
    pub extremizer_error: f64,
    pub passed: bool,
}

/// Evaluates both sides of the sparse-form reduction with extremizing sign patterns.
pub fn weighted_embedding(s: &SparseCollection, w: &MatrixWeight, f1: &GridFunction, f2: &GridFunction) -> Result<EmbeddingReport> {
    w.check_function(f1)?;
    w.check_function(f2)?;
    let v = [w.inverse()?, w.clone()];
    let g = [v[0].apply(f1)?, v[1].apply(f2)?];
    let norms_sq = [weighted_norm(f1, &v[0])?.powi(2), weighted_norm(f2, &v[1])?.powi(2)];
    let characteristic = a2_characteristic(w)?;
    let n = w.n;
    let pyr = [v[0].pyramid(), v[1].pyramid()];
    let mut form = 0.0;
    let mut emb = [0.0; 2];
    let mut extremizer_error = 0.0f64;
    for q in s.cubes() {
        let k1 = Zonotope::body_average(&g[0], q)?;
        let k2 = Zonotope::body_average(&g[1], q)?;
        let p = minkowski_product(&k1, &k2)?;
        let f = [k1.point(&p.signs_k), k2.point(&p.signs_h)];
        let dotp: f64 = f[0].iter().zip(&f[1]).map(|(a, b)| a * b).sum();
        if p.value > 0.0 {
            extremizer_error = extremizer_error.max((dotp - p.value).abs() / p.value);
        } else {
            extremizer_error = extremizer_error.max(dotp.abs());
        }
        form += q.measure() * p.value;
        for j in 0..2 {
            let avg = cell_matrix(n, pyr[j].get(q)) / q.cell_count(w.finest) as f64;
            let inv = spd_function(&avg, |x| 1.0 / x)?;
            let fv = nalgebra::DVector::from_column_slice(&f[j]);
            emb[j] += q.measure() * fv.dot(&(&inv * &fv));
        }
    }
    let embedding_constant = [0, 1].map(|j| if norms_sq[j] > 0.0 { emb[j] / (characteristic * norms_sq[j]) } else { 0.0 });
    let rhs = characteristic.sqrt() * (emb[0] * emb[1]).sqrt();
    let reduction_ratio = if rhs > 0.0 { form / rhs } else { 0.0 };
    Ok(EmbeddingReport {
        sparse_form: form,
        embedding: emb,
        norms_sq,
        characteristic,
        embedding_constant,
        reduction_ratio,
        extremizer_error,
        passed: reduction_ratio <= 1.0 + 1e-9 && extremizer_error <= 1e-9,
    })
}

/// Experiment families of matrix weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightFamily {
    /// `u(x)^a Id` with `u(x) = (dist(x, H) + 2^{-L})^{-1}`, `a ∈ (−1, 1)`.
    ScalarPower,
    /// `R_θ diag(u^a, u^{-a}) R_θᵀ` in the first two coordinates, `a ∈ [0, 1)`,
    /// with `θ` turning by `π/4` per octave of `u`.
    Rotating,
    /// Seeded random SPD blocks with eigenvalues `exp(a z)`, `z ∈ [−1, 1]`, `a ∈ [0, 12]`.
    BlockRandom,
}

impl WeightFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            WeightFamily::ScalarPower => "scalar-power",
            WeightFamily::Rotating => "rotating",
            WeightFamily::BlockRandom => "block-random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scalar-power" => Some(WeightFamily::ScalarPower),
            "rotating" => Some(WeightFamily::Rotating),
            "block-random" => Some(WeightFamily::BlockRandom),
            _ => None,
        }
    }

    pub fn param_range(&self) -> (f64, f64) {
        match self {
            WeightFamily::ScalarPower => (-1.0, 1.0),
            WeightFamily::Rotating => (0.0, 1.0),
            WeightFamily::BlockRandom => (0.0, 12.0),
        }
    }
}

impl std::fmt::Display for WeightFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Distance from the cell center to the hyperplane `x_0 = 1/2`, plus one cell side.
fn singular_profile(cube: &DyadicCube, finest: u32) -> f64 {
    let side = (-(finest as f64)).exp2();
    (cube.center()[0] - 0.5).abs() + side
}

/// Frame rotation per halving of the distance to the singular hyperplane.
const ROTATION_PER_OCTAVE: f64 = std::f64::consts::FRAC_PI_4;

/// Depth of the constant blocks of the block-random family.
const BLOCK_DEPTH: u32 = 3;

pub fn weight_family(family: WeightFamily, param: f64, seed: u64, dim: usize, finest: u32, n: usize) -> Result<MatrixWeight> {
    check_grid(dim, finest)?;
    let (lo, hi) = family.param_range();
    let in_range = match family {
        WeightFamily::ScalarPower => param > lo && param < hi,
        WeightFamily::Rotating => param >= lo && param < hi,
        WeightFamily::BlockRandom => param >= lo && param <= hi,
    };
    if !in_range || !param.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "{family} parameter {param} outside [{lo}, {hi})"
        )));
    }
    match family {
        WeightFamily::ScalarPower => MatrixWeight::from_fn(dim, finest, n, |c| {
            DMatrix::identity(n, n) * singular_profile(c, finest).powf(-param)
        }),
        WeightFamily::Rotating => {
            if n < 2 {
                return Err(Error::InvalidParameter("the rotating family needs n ≥ 2".into()));
            }
            let theta0 = ChaCha8Rng::seed_from_u64(seed).gen_range(0.0..std::f64::consts::PI);
            MatrixWeight::from_fn(dim, finest, n, |c| {
                let u = singular_profile(c, finest).powf(-param);
                let t = theta0 + ROTATION_PER_OCTAVE * singular_profile(c, finest).log2();
                let (s, co) = t.sin_cos();
                let mut m = DMatrix::identity(n, n);
                m[(0, 0)] = co * co * u + s * s / u;
                m[(1, 1)] = s * s * u + co * co / u;
                m[(0, 1)] = co * s * (u - 1.0 / u);
                m[(1, 0)] = m[(0, 1)];
                m
            })
        }
        WeightFamily::BlockRandom => {
            let depth = BLOCK_DEPTH.min(finest);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blocks: Vec<DMatrix<f64>> = (0..1u64 << (dim as u32 * depth))
                .map(|_| {
                    let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
                    let q = g.qr().q();
                    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |_, _| (param * rng.gen_range(-1.0..1.0)).exp()));
                    let m = &q * d * q.transpose();
                    (&m + m.transpose()) * 0.5
                })
                .collect();
            MatrixWeight::from_fn(dim, finest, n, |c| blocks[c.ancestor(depth).unwrap().morton() as usize].clone())
        }
    }
}

/// Parameters of a weighted scaling sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub family: WeightFamily,
    pub params: Vec<f64>,
    pub dim: usize,
    pub finest: u32,
    pub n: usize,
    pub rho: u32,
    pub shifts: usize,
    pub shift_seed: u64,
    pub weight_seed: u64,
    pub density: f64,
    /// Largest admissible `‖T ⊗ Id‖_{L²(W)} / [W]^{3/2}`.
    pub ratio_envelope: f64,
    /// Largest admissible fitted log-log slope of norm against characteristic.
    pub slope_envelope: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            family: WeightFamily::Rotating,
            params: grid_spec(0.0, 0.9, 10),
            dim: 1,
            finest: 10,
            n: 2,
            rho: 2,
            shifts: 20,
            shift_seed: 0,
            weight_seed: 0,
            density: 0.3,
            ratio_envelope: 1.0,
            slope_envelope: 1.6,
        }
    }
}

/// `count` equally spaced points from `lo` to `hi` inclusive.
pub fn grid_spec(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect(),
    }
}

/// Parses `lo:hi:count`.
pub fn parse_grid_spec(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::InvalidParameter(format!("grid `{s}` is not of the form lo:hi:count"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if !lo.is_finite() || !hi.is_finite() || count > 10_000 {
        return Err(bad());
    }
    Ok(grid_spec(lo, hi, count))
}

/// One sweep parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: f64,
    pub characteristic: f64,
    /// Largest weighted norm over the shifts.
    pub norm: f64,
    /// `norm / characteristic^{3/2}`.
    pub ratio: f64,
    /// Fitted slope over the points up to this one (absent with fewer than two distinct characteristics).
    pub slope_so_far: Option<f64>,
    /// Per-shift weighted norms, in shift order.
    pub shift_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub points: Vec<SweepPoint>,
    /// Unweighted norms of the shifts.
    pub unweighted: Vec<f64>,
    /// Certified bounds of the shifts.
    pub certified: Vec<f64>,
    pub slope: Option<f64>,
    pub max_ratio: f64,
    /// Largest `|weighted − unweighted| / unweighted` over constant-weight points.
    pub constant_weight_error: f64,
    pub characteristic_decades: f64,
    pub passed: bool,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("param,characteristic,norm,ratio,slope_so_far\n");
        for p in &self.points {
            let slope = p.slope_so_far.map(|s| format!("{s:.17e}")).unwrap_or_default();
            out.push_str(&format!(
                "{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
                p.param, p.characteristic, p.norm, p.ratio, slope
            ));
        }
        out
    }
}

fn fitted_slope(points: &[SweepPoint]) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().map(|p| (p.characteristic, p.norm)).unzip();
    let distinct = xs.iter().any(|x| (x / xs[0] - 1.0).abs() > 1e-9);
    if !distinct || ys.iter().any(|y| *y <= 0.0) {
        return None;
    }
    log_log_slope(&xs, &ys).map(|f| f.slope)
}

/// Sweeps a weight family against seeded A2-normalized random shifts.
pub fn weighted_sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    use rayon::prelude::*;
    use crate::shift::{normalize_a2, random_shift, A2Strategy, RandomShiftSpec};
    if cfg.shifts == 0 {
        return Err(Error::InvalidParameter("a sweep needs at least one shift".into()));
    }
    let spec = RandomShiftSpec::new(cfg.dim, cfg.finest, cfg.rho, cfg.density);
    let shifts: Vec<DyadicShift> = (0..cfg.shifts as u64)
        .map(|i| {
            let s = random_shift(crate::numeric::derive_seed(cfg.shift_seed, i), &spec)?;
            if s.certificate().is_certified() {
                Ok(s)
            } else {
                normalize_a2(&s, A2Strategy::ScaleCount, 8)
            }
        })
        .collect::<Result<_>>()?;
    let unweighted: Vec<f64> = shifts
        .par_iter()
        .map(|s| weighted_operator_norm(s, &MatrixWeight::identity(cfg.dim, cfg.finest, 1)?).map(|e| e.value))
        .collect::<Result<_>>()?;
    let certified: Vec<f64> = shifts.iter().map(|s| s.certificate().bound).collect();
    let weights: Vec<MatrixWeight> = cfg
        .params
        .iter()
        .map(|&a| weight_family(cfg.family, a, cfg.weight_seed, cfg.dim, cfg.finest, cfg.n))
        .collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(weights.len());
    let mut constant_weight_error = 0.0f64;
    for (w, &param) in weights.iter().zip(&cfg.params) {
        let characteristic = a2_characteristic(w)?;
        let shift_norms: Vec<f64> = shifts
            .par_iter()
            .map(|s| weighted_operator_norm(s, w).map(|e| e.value))
            .collect::<Result<_>>()?;
        if w.is_constant() {
            for (a, b) in shift_norms.iter().zip(&unweighted) {
                if *b > 0.0 {
                    constant_weight_error = constant_weight_error.max((a - b).abs() / b);
                }
            }
        }
        let norm = shift_norms.iter().copied().fold(0.0f64, f64::max);
        points.push(SweepPoint {
            param,
            characteristic,
            norm,
            ratio: norm / characteristic.powf(1.5),
            slope_so_far: None,
            shift_norms,
        });
        let slope = fitted_slope(&points);
        points.last_mut().unwrap().slope_so_far = slope;
    }
    let slope = fitted_slope(&points);
    let max_ratio = points.iter().map(|p| p.ratio).fold(0.0f64, f64::max);
    let (cmin, cmax) = points
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), p| (lo.min(p.characteristic), hi.max(p.characteristic)));
    let characteristic_decades = if points.is_empty() { 0.0 } else { (cmax / cmin).log10() };
    let passed = max_ratio <= cfg.ratio_envelope * (1.0 + 1e-9)
        && slope.is_none_or(|s| s <= cfg.slope_envelope)
        && constant_weight_error <= 1e-12;
    Ok(SweepReport {
        config: cfg.clone(),
        points,
        unweighted,
        certified,
        slope,
        max_ratio,
        constant_weight_error,
        characteristic_decades,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shift::{random_shift, RandomShiftSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn dense_a2(w: &MatrixWeight) -> f64 {
        // Independent oracle: averages by direct loops, norm by full SVD.
        let mut best = 0.0f64;
        for q in DyadicCube::all(w.dim(), w.finest()) {
            let n = w.n();
            let mut a = DMatrix::zeros(n, n);
            let mut b = DMatrix::zeros(n, n);
            let cells = q.cell_range(w.finest());
            let count = cells.len() as f64;
            for c in cells {
                let m = w.cell(c);
                b += m.clone().try_inverse().unwrap();
                a += m;
            }
            a /= count;
            b /= count;
            let sa = spd_sqrt(&a).unwrap();
            let sb = spd_sqrt(&b).unwrap();
            best = best.max((sa * sb).singular_values().max().powi(2));
        }
        best
    }

    #[test]
    fn constant_weight_has_characteristic_one() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let w = MatrixWeight::constant(1, 4, &m).unwrap();
        assert!((a2_characteristic(&w).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_cell_example() {
        let t: f64 = 5.0;
        let w = MatrixWeight::new(1, 1, 1, vec![t, 1.0 / t]).unwrap();
        let expected = ((t + 1.0 / t) / 2.0).powi(2);
        let a = a2_characteristic_detailed(&w).unwrap();
        assert!((a.value - expected).abs() < 1e-12 * expected);
        assert_eq!(a.cube, DyadicCube::root(1));
    }

    #[test]
    fn rejects_degenerate_cells() {
        assert!(matches!(
            MatrixWeight::new(1, 1, 2, vec![1.0, 0.0, 0.0, 1e-14, 1.0, 0.0, 0.0, 1.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(MatrixWeight::new(1, 1, 2, vec![1.0, 0.5, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn identity_weight_gives_l2_norm() {
        let f = GridFunction::new(1, 3, 2, (0..16).map(|x| x as f64 - 7.5).collect()).unwrap();
        let w = MatrixWeight::identity(1, 3, 2).unwrap();
        let l2 = (f.values().iter().map(|v| v * v).sum::<f64>() * f.cell_measure()).sqrt();
        assert!((weighted_norm(&f, &w).unwrap() - l2).abs() < 1e-14 * l2);
    }

    #[test]
    fn families_at_zero_are_constant() {
        for fam in [WeightFamily::Rotating, WeightFamily::BlockRandom] {
            let w = weight_family(fam, 0.0, 3, 1, 6, 2).unwrap();
            assert!((a2_characteristic(&w).unwrap() - 1.0).abs() < 1e-12, "{fam}");
        }
        assert!(weight_family(WeightFamily::Rotating, 1.0, 0, 1, 6, 2).is_err());
        assert!(weight_family(WeightFamily::Rotating, 0.5, 0, 1, 6, 1).is_err());
        assert!(weight_family(WeightFamily::ScalarPower, -1.0, 0, 1, 6, 1).is_err());
    }

    #[test]
    fn same_seed_same_weight() {
        let a = weight_family(WeightFamily::BlockRandom, 2.0, 9, 2, 3, 3).unwrap();
        let b = weight_family(WeightFamily::BlockRandom, 2.0, 9, 2, 3, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scalar_power_is_monotone() {
        let chars: Vec<f64> = grid_spec(0.0, 0.9, 10)
            .into_iter()
            .map(|a| a2_characteristic(&weight_family(WeightFamily::ScalarPower, a, 0, 1, 10, 1).unwrap()).unwrap())
            .collect();
        assert!((chars[0] - 1.0).abs() < 1e-12);
        assert!(chars.windows(2).all(|w| w[1] >= w[0]), "{chars:?}");
    }

    #[test]
    fn grid_spec_parsing() {
        let g = parse_grid_spec("0:0.9:10").unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g[0], 0.0);
        assert!((g[9] - 0.9).abs() < 1e-15);
        assert!(parse_grid_spec("0:1").is_err());
        assert!(parse_grid_spec("a:1:2").is_err());
    }

    fn normalized_shift(seed: u64, finest: u32) -> DyadicShift {
        let spec = RandomShiftSpec::new(1, finest, 2, 0.4);
        random_shift(seed, &spec).unwrap()
    }

    #[test]
    fn weighted_norm_matches_dense_conjugation() {
        let s = normalized_shift(4, 5);
        let w = weight_family(WeightFamily::Rotating, 0.6, 1, 1, 5, 2).unwrap();
        let m = s.dense_matrix(Selection::All).unwrap().transpose();
        let cells = w.num_cells();
        let mut big = DMatrix::zeros(2 * cells, 2 * cells);
        for a in 0..cells {
            for b in 0..cells {
                for k in 0..2 {
                    big[(2 * a + k, 2 * b + k)] = m[(a, b)];
                }
            }
        }
        let mut half = DMatrix::zeros(2 * cells, 2 * cells);
        let mut inv_half = DMatrix::zeros(2 * cells, 2 * cells);
        for c in 0..cells {
            half.view_mut((2 * c, 2 * c), (2, 2)).copy_from(&spd_sqrt(&w.cell(c)).unwrap());
            inv_half.view_mut((2 * c, 2 * c), (2, 2)).copy_from(&spd_inv_sqrt(&w.cell(c)).unwrap());
        }
        let oracle = crate::linalg::dense_spectral_norm(&(half * big * inv_half));
        let got = weighted_operator_norm(&s, &w).unwrap().value;
        assert!((got - oracle).abs() <= 1e-7 * oracle, "{got} vs {oracle}");
    }

    #[test]
    fn constant_weight_reproduces_unweighted_norm() {
        let s = normalized_shift(8, 6);
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 1.0]);
        let w = MatrixWeight::constant(1, 6, &m).unwrap();
        let plain = weighted_operator_norm(&s, &MatrixWeight::identity(1, 6, 1).unwrap()).unwrap().value;
        assert_eq!(weighted_operator_norm(&s, &w).unwrap().value, plain);
        let oracle = crate::linalg::dense_spectral_norm(&s.dense_matrix(Selection::All).unwrap());
        assert!((plain - oracle).abs() <= 1e-8 * oracle);
    }

    #[test]
    fn size_limit_enforced() {
        let s = DyadicShift::empty(2, 6, 1, 1).unwrap();
        let w = MatrixWeight::identity(2, 6, 3).unwrap();
        assert!(matches!(weighted_operator_norm(&s, &w), Err(Error::SizeOverflow { .. })));
    }

    #[test]
    fn carleson_packing_examples() {
        let w = weight_family(WeightFamily::Rotating, 0.5, 2, 1, 6, 2).unwrap();
        let root = SparseCollection::from_cubes(1, 6, &[DyadicCube::root(1)]).unwrap();
        for j in [1, 2] {
            let r = carleson_packing(&root, &w, j).unwrap();
            assert!((r.packing - 1.0).abs() < 1e-9 && r.passed);
        }
        assert!(carleson_packing(&root, &w, 3).is_err());
        let s = crate::sparse::random_sparse_collection(5, 1, 6, 0.5, 0.3).unwrap();
        let rep = crate::sparse::verify_sparse(&s, 0.5).unwrap();
        let r = carleson_packing(&s, &w, 1).unwrap();
        assert!(r.passed);
        let id = carleson_packing(&s, &MatrixWeight::identity(1, 6, 2).unwrap(), 2).unwrap();
        let measure_packing = s
            .cubes()
            .map(|r| s.cubes().filter(|q| r.contains(q)).map(|q| q.measure()).sum::<f64>() / r.measure())
            .fold(0.0, f64::max);
        assert!((id.packing - measure_packing).abs() < 1e-12);
        if rep.passed {
            assert!(r.packing <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn embedding_reduction_holds() {
        let w = weight_family(WeightFamily::Rotating, 0.7, 1, 1, 7, 2).unwrap();
        let f1 = GridFunction::from_fn(1, 7, 2, |c| vec![(c.morton() as f64).sin(), (c.morton() as f64 * 0.3).cos()]).unwrap();
        let f2 = GridFunction::from_fn(1, 7, 2, |c| vec![1.0 / (1.0 + c.morton() as f64), (c.morton() % 3) as f64 - 1.0]).unwrap();
        let s = crate::sparse::build_sparse_collection(&f1.coordinate(0).unwrap(), &f2.coordinate(1).unwrap(), 4.0).unwrap();
        let r = weighted_embedding(&s, &w, &f1, &f2).unwrap();
        assert!(r.passed, "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn characteristic_matches_oracle_and_symmetries(seed in any::<u64>(), a in 0.0f64..4.0, c in 0.01f64..100.0) {
            let w = weight_family(WeightFamily::BlockRandom, a, seed, 1, 5, 2).unwrap();
            let v = a2_characteristic(&w).unwrap();
            prop_assert!(v >= 1.0 - 1e-12);
            let oracle = dense_a2(&w);
            prop_assert!((v - oracle).abs() <= 1e-9 * oracle);
            let inv = a2_characteristic(&w.inverse().unwrap()).unwrap();
            prop_assert!((v - inv).abs() <= 1e-9 * v);
            let scaled = a2_characteristic(&w.scaled(c).unwrap()).unwrap();
            prop_assert!((v - scaled).abs() <= 1e-9 * v);
        }

        #[test]
        fn weighted_norm_matches_quadratic_form(seed in any::<u64>(), a in 0.0f64..0.9) {
            let w = weight_family(WeightFamily::Rotating, a, seed, 1, 4, 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = GridFunction::new(1, 4, 2, (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let mut q = 0.0;
            for c in 0..16 {
                let v = nalgebra::DVector::from_column_slice(f.value(c));
                q += v.dot(&(w.cell(c) * &v)) / 16.0;
            }
            prop_assert!((weighted_norm(&f, &w).unwrap() - q.sqrt()).abs() <= 1e-12 * q.sqrt());
        }

        #[test]
        fn weighted_norm_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
            let s = normalized_shift(seed, 5);
            let w = weight_family(WeightFamily::Rotating, 0.5, seed, 1, 5, 2).unwrap();
            let a = weighted_operator_norm(&s, &w).unwrap().value;
            let b = weighted_operator_norm(&s, &w.scaled(c).unwrap()).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-7 * a.max(1e-300));
        }
    }
}
