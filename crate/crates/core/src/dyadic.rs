//! Dyadic cubes of the unit cube `[0,1)^d` and piecewise-constant grid functions.
//!
//! Finest cells are stored in Morton (Z-order), so every dyadic cube is a
//! contiguous range of cells. For `d = 1` Morton order is the natural order.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

/// Largest supported lattice dimension.
pub const MAX_DIM: usize = 2;

/// Desk-scale limit on the finest level, per lattice dimension.
pub const fn max_finest_depth(dim: usize) -> u32 {
    match dim {
        1 => 12,
        _ => 6,
    }
}

fn interleave(index: &[u32; MAX_DIM], dim: usize, depth: u32) -> u64 {
    if dim == 1 {
        return index[0] as u64;
    }
    let mut code = 0u64;
    for bit in 0..depth {
        for (k, i) in index.iter().take(dim).enumerate() {
            code |= (((*i >> bit) & 1) as u64) << (dim as u32 * bit + k as u32);
        }
    }
    code
}

fn deinterleave(code: u64, dim: usize, depth: u32) -> [u32; MAX_DIM] {
    let mut index = [0u32; MAX_DIM];
    if dim == 1 {
        index[0] = code as u32;
        return index;
    }
    for bit in 0..depth {
        for (k, i) in index.iter_mut().take(dim).enumerate() {
            *i |= (((code >> (dim as u32 * bit + k as u32)) & 1) as u32) << bit;
        }
    }
    index
}

/// A dyadic subcube of the unit cube: `prod_k [i_k 2^-depth, (i_k + 1) 2^-depth)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DyadicCube {
    dim: u8,
    depth: u8,
    index: [u32; MAX_DIM],
}

impl DyadicCube {
    pub fn root(dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "lattice dimension must be 1 or 2");
        DyadicCube {
            dim: dim as u8,
            depth: 0,
            index: [0; MAX_DIM],
        }
    }

    pub fn new(dim: usize, depth: u32, index: &[u32]) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(Error::InvalidParameter(format!(
                "lattice dimension {dim} not in 1..={MAX_DIM}"
            )));
        }
        if index.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "index has {} entries, lattice dimension is {dim}",
                index.len()
            )));
        }
        if depth > 31 {
            return Err(Error::InvalidParameter(format!("depth {depth} too large")));
        }
        if index.iter().any(|&i| (i as u64) >= (1u64 << depth)) {
            return Err(Error::InvalidParameter(format!(
                "index {index:?} out of range at depth {depth}"
            )));
        }
        let mut idx = [0u32; MAX_DIM];
        idx[..dim].copy_from_slice(index);
        Ok(DyadicCube {
            dim: dim as u8,
            depth: depth as u8,
            index: idx,
        })
    }

    /// The cube at `depth` whose Morton code is `code`.
    pub fn from_morton(dim: usize, depth: u32, code: u64) -> Self {
        DyadicCube {
            dim: dim as u8,
            depth: depth as u8,
            index: deinterleave(code, dim, depth),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn depth(&self) -> u32 {
        self.depth as u32
    }

    pub fn index(&self) -> &[u32] {
        &self.index[..self.dim()]
    }

    pub fn morton(&self) -> u64 {
        interleave(&self.index, self.dim(), self.depth())
    }

    /// Side length `2^-depth`.
    pub fn side(&self) -> f64 {
        (-(self.depth() as f64)).exp2()
    }

    /// Lebesgue measure `2^(-d depth)`.
    pub fn measure(&self) -> f64 {
        (-((self.dim() as u32 * self.depth()) as f64)).exp2()
    }

    pub fn num_children(&self) -> usize {
        1 << self.dim()
    }

    /// Child number `c` in Morton order: bit `k` of `c` selects the upper half along axis `k`.
    pub fn child(&self, c: usize) -> DyadicCube {
        let mut index = [0u32; MAX_DIM];
        for (k, i) in index.iter_mut().take(self.dim()).enumerate() {
            *i = 2 * self.index[k] + ((c >> k) & 1) as u32;
        }
        DyadicCube {
            dim: self.dim,
            depth: self.depth + 1,
            index,
        }
    }

    /// The `2^d` children; fails when they would lie below the finest level.
    pub fn children(&self, finest: u32) -> Result<Vec<DyadicCube>> {
        if self.depth() >= finest {
            return Err(Error::DepthOverflow {
                depth: self.depth() + 1,
                finest,
            });
        }
        Ok((0..self.num_children()).map(|c| self.child(c)).collect())
    }

    pub fn parent(&self) -> Option<DyadicCube> {
        if self.depth == 0 {
            return None;
        }
        let mut index = [0u32; MAX_DIM];
        for (k, i) in index.iter_mut().take(self.dim()).enumerate() {
            *i = self.index[k] >> 1;
        }
        Some(DyadicCube {
            dim: self.dim,
            depth: self.depth - 1,
            index,
        })
    }

    /// The ancestor at `depth` (the cube itself when depths agree).
    pub fn ancestor(&self, depth: u32) -> Option<DyadicCube> {
        if depth > self.depth() {
            return None;
        }
        let shift = self.depth() - depth;
        let mut index = [0u32; MAX_DIM];
        for (k, i) in index.iter_mut().take(self.dim()).enumerate() {
            *i = self.index[k] >> shift;
        }
        Some(DyadicCube {
            dim: self.dim,
            depth: depth as u8,
            index,
        })
    }

    /// `other ⊆ self`.
    pub fn contains(&self, other: &DyadicCube) -> bool {
        self.dim == other.dim
            && other.depth >= self.depth
            && other.ancestor(self.depth()).as_ref() == Some(self)
    }

    pub fn strictly_contains(&self, other: &DyadicCube) -> bool {
        other.depth > self.depth && self.contains(other)
    }

    pub fn is_disjoint(&self, other: &DyadicCube) -> bool {
        !self.contains(other) && !other.contains(self)
    }

    /// Subcube number `k` (Morton order) at relative depth `rel`.
    pub fn subcube(&self, rel: u32, k: u64) -> DyadicCube {
        let depth = self.depth() + rel;
        let code = (self.morton() << (self.dim() as u32 * rel)) + k;
        DyadicCube::from_morton(self.dim(), depth, code)
    }

    pub fn num_subcubes(&self, rel: u32) -> usize {
        1usize << (self.dim() as u32 * rel)
    }

    /// Number of finest cells inside the cube.
    pub fn cell_count(&self, finest: u32) -> usize {
        debug_assert!(self.depth() <= finest);
        1usize << (self.dim() as u32 * (finest - self.depth()))
    }

    /// Range of finest-cell indices (Morton order) covered by the cube.
    pub fn cell_range(&self, finest: u32) -> Range<usize> {
        let shift = self.dim() as u32 * (finest - self.depth());
        let start = (self.morton() << shift) as usize;
        start..start + (1usize << shift)
    }

    /// Lower corner coordinates.
    pub fn corner(&self) -> [f64; MAX_DIM] {
        let mut out = [0.0; MAX_DIM];
        for (k, o) in out.iter_mut().take(self.dim()).enumerate() {
            *o = self.index[k] as f64 * self.side();
        }
        out
    }

    pub fn center(&self) -> [f64; MAX_DIM] {
        let mut out = self.corner();
        for o in out.iter_mut().take(self.dim()) {
            *o += 0.5 * self.side();
        }
        out
    }

    /// All cubes of the lattice from depth 0 to `finest`, coarse to fine.
    pub fn all(dim: usize, finest: u32) -> impl Iterator<Item = DyadicCube> {
        (0..=finest).flat_map(move |depth| {
            (0..(1u64 << (dim as u32 * depth)))
                .map(move |code| DyadicCube::from_morton(dim, depth, code))
        })
    }

    /// Descendants of the cube (itself included) down to `finest`, coarse to fine.
    pub fn descendants(&self, finest: u32) -> impl Iterator<Item = DyadicCube> {
        let cube = *self;
        (0..=finest.saturating_sub(cube.depth())).flat_map(move |rel| {
            (0..cube.num_subcubes(rel) as u64).map(move |k| cube.subcube(rel, k))
        })
    }
}

impl fmt::Display for DyadicCube {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = self.side();
        for k in 0..self.dim() {
            if k > 0 {
                write!(f, "x")?;
            }
            let lo = self.index[k] as f64 * side;
            write!(f, "[{},{})", lo, lo + side)?;
        }
        Ok(())
    }
}

impl fmt::Debug for DyadicCube {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q(d{}:{:?})", self.depth, self.index())
    }
}

/// Piecewise-constant `R^n`-valued function on the finest cells of the unit cube.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    dim: usize,
    finest: u32,
    n: usize,
    values: Vec<f64>,
}

impl fmt::Debug for GridFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GridFunction")
            .field("dim", &self.dim)
            .field("finest", &self.finest)
            .field("n", &self.n)
            .finish_non_exhaustive()
    }
}

/// `(L1, L2, L-infinity)` norms; pointwise magnitudes are Euclidean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

pub fn check_grid(dim: usize, finest: u32) -> Result<()> {
    if !(1..=MAX_DIM).contains(&dim) {
        return Err(Error::InvalidParameter(format!(
            "lattice dimension {dim} not in 1..={MAX_DIM}"
        )));
    }
    if finest > max_finest_depth(dim) {
        return Err(Error::InvalidParameter(format!(
            "finest depth {finest} exceeds the limit {} for d = {dim}",
            max_finest_depth(dim)
        )));
    }
    Ok(())
}

impl GridFunction {
    /// Values are cell-major: `values[c * n + k]` is coordinate `k` on cell `c`.
    pub fn new(dim: usize, finest: u32, n: usize, values: Vec<f64>) -> Result<Self> {
        check_grid(dim, finest)?;
        if n == 0 {
            return Err(Error::InvalidParameter("value dimension n must be >= 1".into()));
        }
        let cells = 1usize << (dim as u32 * finest);
        if values.len() != cells * n {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values ({cells} cells x {n}), got {}",
                cells * n,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite value at position {pos}"
            )));
        }
        Ok(GridFunction {
            dim,
            finest,
            n,
            values,
        })
    }

    pub fn scalar(dim: usize, finest: u32, values: Vec<f64>) -> Result<Self> {
        Self::new(dim, finest, 1, values)
    }

    pub fn zeros(dim: usize, finest: u32, n: usize) -> Result<Self> {
        let cells = 1usize << (dim as u32 * finest);
        Self::new(dim, finest, n, vec![0.0; cells * n])
    }

    pub fn constant(dim: usize, finest: u32, value: &[f64]) -> Result<Self> {
        let cells = 1usize << (dim as u32 * finest);
        let values = (0..cells).flat_map(|_| value.iter().copied()).collect();
        Self::new(dim, finest, value.len(), values)
    }

    /// Builds values from the finest cell cube.
    pub fn from_fn(
        dim: usize,
        finest: u32,
        n: usize,
        mut f: impl FnMut(&DyadicCube) -> Vec<f64>,
    ) -> Result<Self> {
        check_grid(dim, finest)?;
        let cells = 1usize << (dim as u32 * finest);
        let mut values = Vec::with_capacity(cells * n);
        for c in 0..cells {
            let cube = DyadicCube::from_morton(dim, finest, c as u64);
            let v = f(&cube);
            if v.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "cell function returned {} values, expected {n}",
                    v.len()
                )));
            }
            values.extend(v);
        }
        Self::new(dim, finest, n, values)
    }

    /// `c * 1_Q` for a scalar constant.
    pub fn indicator(dim: usize, finest: u32, cube: &DyadicCube, c: f64) -> Result<Self> {
        check_cube(cube, dim, finest)?;
        let mut f = Self::zeros(dim, finest, 1)?;
        for cell in cube.cell_range(finest) {
            f.values[cell] = c;
        }
        Ok(f)
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
        self.values.len() / self.n
    }

    pub fn cell_measure(&self) -> f64 {
        (-((self.dim as u32 * self.finest) as f64)).exp2()
    }

    pub fn cell(&self, c: usize) -> DyadicCube {
        DyadicCube::from_morton(self.dim, self.finest, c as u64)
    }

    pub fn value(&self, c: usize) -> &[f64] {
        &self.values[c * self.n..(c + 1) * self.n]
    }

    pub fn value_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.values[c * self.n..(c + 1) * self.n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn root(&self) -> DyadicCube {
        DyadicCube::root(self.dim)
    }

    pub(crate) fn check_cube(&self, cube: &DyadicCube) -> Result<()> {
        check_cube(cube, self.dim, self.finest)
    }

    pub(crate) fn check_same_grid(&self, other: &GridFunction) -> Result<()> {
        if self.dim != other.dim || self.finest != other.finest {
            return Err(Error::DimensionMismatch(format!(
                "grids differ: (d={}, L={}) vs (d={}, L={})",
                self.dim, self.finest, other.dim, other.finest
            )));
        }
        Ok(())
    }

    pub(crate) fn check_compatible(&self, other: &GridFunction) -> Result<()> {
        self.check_same_grid(other)?;
        if self.n != other.n {
            return Err(Error::DimensionMismatch(format!(
                "value dimensions differ: {} vs {}",
                self.n, other.n
            )));
        }
        Ok(())
    }

    fn magnitude(&self, c: usize) -> f64 {
        let v = self.value(c);
        if self.n == 1 {
            v[0].abs()
        } else {
            v.iter().map(|x| x * x).sum::<f64>().sqrt()
        }
    }

    /// Signed integral over `cube`, per coordinate.
    pub fn integral(&self, cube: &DyadicCube) -> Result<Vec<f64>> {
        self.check_cube(cube)?;
        let mut sums = vec![CompensatedSum::default(); self.n];
        for c in cube.cell_range(self.finest) {
            for (s, v) in sums.iter_mut().zip(self.value(c)) {
                s.add(*v);
            }
        }
        let m = self.cell_measure();
        Ok(sums.into_iter().map(|s| s.total() * m).collect())
    }

    /// Signed average over `cube`, per coordinate.
    pub fn signed_average(&self, cube: &DyadicCube) -> Result<Vec<f64>> {
        let mut v = self.integral(cube)?;
        let inv = 1.0 / cube.measure();
        v.iter_mut().for_each(|x| *x *= inv);
        Ok(v)
    }

    /// `∫_Q |f|` with the Euclidean magnitude for `n > 1`.
    pub fn abs_integral(&self, cube: &DyadicCube) -> Result<f64> {
        self.check_cube(cube)?;
        let mut s = CompensatedSum::default();
        for c in cube.cell_range(self.finest) {
            s.add(self.magnitude(c));
        }
        Ok(s.total() * self.cell_measure())
    }

    /// `<|f|>_Q`.
    pub fn abs_average(&self, cube: &DyadicCube) -> Result<f64> {
        Ok(self.abs_integral(cube)? / cube.measure())
    }

    /// `<f>_Q = |Q|^-1 ∫_Q |f|` for scalar functions.
    pub fn scalar_average(&self, cube: &DyadicCube) -> Result<f64> {
        if self.n != 1 {
            return Err(Error::DimensionMismatch(format!(
                "scalar average requires n = 1, got n = {}",
                self.n
            )));
        }
        self.abs_average(cube)
    }

    pub fn norms(&self) -> Norms {
        let m = self.cell_measure();
        let mut l1 = CompensatedSum::default();
        let mut l2 = CompensatedSum::default();
        let mut linf = 0.0f64;
        for c in 0..self.num_cells() {
            let a = self.magnitude(c);
            l1.add(a);
            l2.add(a * a);
            linf = linf.max(a);
        }
        Norms {
            l1: l1.total() * m,
            l2: (l2.total() * m).sqrt(),
            linf,
        }
    }

    pub fn inner_product(&self, other: &GridFunction) -> Result<f64> {
        self.check_compatible(other)?;
        let mut s = CompensatedSum::default();
        for (a, b) in self.values.iter().zip(&other.values) {
            s.add(a * b);
        }
        Ok(s.total() * self.cell_measure())
    }

    /// `f 1_Q`.
    pub fn restrict(&self, cube: &DyadicCube) -> Result<GridFunction> {
        self.check_cube(cube)?;
        let range = cube.cell_range(self.finest);
        let mut out = GridFunction {
            dim: self.dim,
            finest: self.finest,
            n: self.n,
            values: vec![0.0; self.values.len()],
        };
        let lo = range.start * self.n;
        let hi = range.end * self.n;
        out.values[lo..hi].copy_from_slice(&self.values[lo..hi]);
        Ok(out)
    }

    /// Coordinate `k` as a scalar function.
    pub fn coordinate(&self, k: usize) -> Result<GridFunction> {
        if k >= self.n {
            return Err(Error::DimensionMismatch(format!(
                "coordinate {k} out of range for n = {}",
                self.n
            )));
        }
        Ok(GridFunction {
            dim: self.dim,
            finest: self.finest,
            n: 1,
            values: (0..self.num_cells()).map(|c| self.value(c)[k]).collect(),
        })
    }

    /// Stacks scalar functions into one `R^n`-valued function.
    pub fn stack(coords: &[GridFunction]) -> Result<GridFunction> {
        let first = coords
            .first()
            .ok_or_else(|| Error::InvalidParameter("no coordinates to stack".into()))?;
        for c in coords {
            first.check_same_grid(c)?;
            if c.n != 1 {
                return Err(Error::DimensionMismatch("stack expects scalar functions".into()));
            }
        }
        let n = coords.len();
        let cells = first.num_cells();
        let mut values = Vec::with_capacity(cells * n);
        for c in 0..cells {
            for f in coords {
                values.push(f.values[c]);
            }
        }
        GridFunction::new(first.dim, first.finest, n, values)
    }

    /// Pointwise `x -> M x` for a row-major `n_out x n` matrix.
    pub fn linear_map(&self, matrix: &[f64], n_out: usize) -> Result<GridFunction> {
        if matrix.len() != n_out * self.n {
            return Err(Error::DimensionMismatch(format!(
                "matrix has {} entries, expected {}x{}",
                matrix.len(),
                n_out,
                self.n
            )));
        }
        let mut values = Vec::with_capacity(self.num_cells() * n_out);
        for c in 0..self.num_cells() {
            let v = self.value(c);
            for i in 0..n_out {
                let row = &matrix[i * self.n..(i + 1) * self.n];
                values.push(row.iter().zip(v).map(|(a, b)| a * b).sum());
            }
        }
        GridFunction::new(self.dim, self.finest, n_out, values)
    }

    pub fn scale(&self, s: f64) -> GridFunction {
        GridFunction {
            values: self.values.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction> {
        self.check_compatible(other)?;
        Ok(GridFunction {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
            ..self.clone()
        })
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        self.add(&other.scale(-1.0))
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    /// Bottom-up masses `∫_Q |f|` for every cube of the lattice.
    pub fn mass_pyramid(&self) -> Pyramid {
        Pyramid::build(self.dim, self.finest, 1, |c, out| {
            out[0] = self.magnitude(c) * self.cell_measure();
        })
    }

    /// Bottom-up signed integrals per coordinate for every cube.
    pub fn signed_pyramid(&self) -> Pyramid {
        let m = self.cell_measure();
        Pyramid::build(self.dim, self.finest, self.n, |c, out| {
            for (o, v) in out.iter_mut().zip(self.value(c)) {
                *o = v * m;
            }
        })
    }
}

pub(crate) fn check_cube(cube: &DyadicCube, dim: usize, finest: u32) -> Result<()> {
    if cube.dim() != dim {
        return Err(Error::DimensionMismatch(format!(
            "cube lives in dimension {}, grid in {dim}",
            cube.dim()
        )));
    }
    if cube.depth() > finest {
        return Err(Error::DepthOverflow {
            depth: cube.depth(),
            finest,
        });
    }
    Ok(())
}

/// Per-cube sums of a cellwise quantity, for every depth `0..=finest`.
///
/// Level `k` holds `2^(d k)` entries of width `n` in Morton order; each entry is
/// the sum of its `2^d` children, so additivity holds exactly by construction.
#[derive(Debug, Clone)]
pub struct Pyramid {
    dim: usize,
    finest: u32,
    n: usize,
    levels: Vec<Vec<f64>>,
}

impl Pyramid {
    pub fn build(dim: usize, finest: u32, n: usize, mut leaf: impl FnMut(usize, &mut [f64])) -> Self {
        let cells = 1usize << (dim as u32 * finest);
        let mut bottom = vec![0.0; cells * n];
        for c in 0..cells {
            leaf(c, &mut bottom[c * n..(c + 1) * n]);
        }
        let mut levels = vec![bottom];
        let fan = 1usize << dim;
        for _ in 0..finest {
            let below = levels.last().unwrap();
            let count = below.len() / n / fan;
            let mut up = vec![0.0; count * n];
            for p in 0..count {
                for ch in 0..fan {
                    let src = (p * fan + ch) * n;
                    for k in 0..n {
                        up[p * n + k] += below[src + k];
                    }
                }
            }
            levels.push(up);
        }
        levels.reverse();
        Pyramid {
            dim,
            finest,
            n,
            levels,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn finest(&self) -> u32 {
        self.finest
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sums over `cube`; width `n`.
    pub fn get(&self, cube: &DyadicCube) -> &[f64] {
        let code = cube.morton() as usize;
        &self.levels[cube.depth() as usize][code * self.n..(code + 1) * self.n]
    }

    /// Raw level `depth`: `2^(d depth)` entries of width `n` in Morton order.
    pub fn level(&self, depth: u32) -> &[f64] {
        &self.levels[depth as usize]
    }

    pub fn scalar(&self, cube: &DyadicCube) -> f64 {
        self.get(cube)[0]
    }

    /// Scalar sum divided by `|Q|`.
    pub fn average(&self, cube: &DyadicCube) -> f64 {
        self.scalar(cube) / cube.measure()
    }
}

/// Exact value of `Σ_k (∫_Q f_k)(∫_R g_k)`.
pub fn signed_pair_integral(
    f: &GridFunction,
    q: &DyadicCube,
    g: &GridFunction,
    r: &DyadicCube,
) -> Result<f64> {
    f.check_compatible(g)?;
    let a = f.integral(q)?;
    let b = g.integral(r)?;
    Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum())
}
