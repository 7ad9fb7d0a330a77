//! Symmetric convex bodies as zonotopes.
//!
//! The convex-body average of a piecewise-constant `f` over `Q` is the zonotope
//! with generators `f(cell) |cell| / |Q|`; every geometric query reduces to
//! generator calculus. Geometry is exact for `n ≤ 2`, exact for `n = 3` while the
//! generator count keeps pair enumeration affordable, and sampled otherwise.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dyadic::{DyadicCube, GridFunction};
use crate::error::{Error, Result};
use crate::linalg::{dense_spectral_norm, spd_inv_sqrt, sym_eigen};
use crate::numeric::{dot, norm2};

/// Largest supported body dimension.
pub const MAX_BODY_DIM: usize = 3;

/// Unit directions closer than this are merged as parallel.
pub const MERGE_TOL: f64 = 1e-13;

/// Relative singular-value threshold for the rank of a generator set.
pub const RANK_TOL: f64 = 1e-13;

/// Pair enumeration of facet normals in `R^3` is used up to this many generators.
pub const PAIR_LIMIT: usize = 150;

/// Vertex enumeration in `R^3` is used up to this many generators.
pub const VERTEX_LIMIT: usize = 64;

/// Exact sign enumeration up to this many generators on the smaller side.
pub const ENUM_LIMIT: usize = 20;

/// Centrally symmetric zonotope `{Σ t_i g_i : |t_i| ≤ 1}` in canonical form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zonotope {
    n: usize,
    gens: Vec<f64>,
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 || n > MAX_BODY_DIM {
        return Err(Error::Unsupported(format!(
            "body dimension {n} (supported: 1..={MAX_BODY_DIM})"
        )));
    }
    Ok(())
}

/// Canonical generators plus, for every raw generator, `(canonical index, sign)`.
fn canonicalize(n: usize, raw: &[f64]) -> (Vec<f64>, Vec<Option<(usize, f64)>>) {
    let count = raw.len() / n;
    let mut items: Vec<(usize, Vec<f64>, f64, f64)> = Vec::with_capacity(count);
    for i in 0..count {
        let g = &raw[i * n..(i + 1) * n];
        let norm = norm2(g);
        if !(norm > 0.0) || !norm.is_finite() {
            continue;
        }
        let lead = g.iter().find(|x| x.abs() > 1e-13 * norm).copied().unwrap_or(0.0);
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        let dir: Vec<f64> = g.iter().map(|x| sign * x / norm).collect();
        items.push((i, dir, sign, norm));
    }
    items.sort_by(|a, b| {
        a.1.iter()
            .zip(&b.1)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let mut group_dirs: Vec<Vec<f64>> = Vec::new();
    let mut group_sums: Vec<Vec<f64>> = Vec::new();
    let mut assign = vec![None; count];
    for (i, dir, sign, _) in &items {
        let mut found = None;
        for gidx in (0..group_dirs.len()).rev() {
            if group_dirs[gidx][0] < dir[0] - 2.0 * MERGE_TOL {
                break;
            }
            let dist: f64 = group_dirs[gidx]
                .iter()
                .zip(dir)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            if dist <= MERGE_TOL {
                found = Some(gidx);
                break;
            }
        }
        let g = &raw[i * n..(i + 1) * n];
        let gidx = match found {
            Some(gidx) => gidx,
            None => {
                group_dirs.push(dir.clone());
                group_sums.push(vec![0.0; n]);
                group_dirs.len() - 1
            }
        };
        for (s, x) in group_sums[gidx].iter_mut().zip(g) {
            *s += sign * x;
        }
        assign[*i] = Some((gidx, *sign));
    }
    (group_sums.concat(), assign)
}

/// Facet normals (or sampled directions) of a body.
#[derive(Debug, Clone)]
pub struct Normals {
    pub dirs: Vec<Vec<f64>>,
    /// The list contains every facet normal, so support comparisons over it are exact.
    pub exact: bool,
}

/// Vertices of a zonotope and their generator sign patterns.
#[derive(Debug, Clone)]
pub struct VertexSet {
    pub points: Vec<Vec<f64>>,
    pub patterns: Vec<Vec<f64>>,
}

impl Zonotope {
    /// Canonical zonotope from a flat row-major generator list (`p × n`).
    pub fn new(n: usize, gens: &[f64]) -> Result<Self> {
        check_n(n)?;
        if gens.len() % n != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} generator entries do not split into rows of {n}",
                gens.len()
            )));
        }
        if gens.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite generator entry".into()));
        }
        Ok(Zonotope {
            n,
            gens: canonicalize(n, gens).0,
        })
    }

    pub fn from_vectors(vs: &[Vec<f64>]) -> Result<Self> {
        let n = vs.first().map(|v| v.len()).unwrap_or(0);
        if vs.iter().any(|v| v.len() != n) {
            return Err(Error::DimensionMismatch("generators of different lengths".into()));
        }
        Self::new(n, &vs.concat())
    }

    /// Generators kept as given (no merging), for index-preserving projections.
    fn raw(n: usize, gens: Vec<f64>) -> Self {
        Zonotope { n, gens }
    }

    /// The body average `⟨f⟩_Q`.
    pub fn body_average(f: &GridFunction, q: &DyadicCube) -> Result<Self> {
        Ok(Self::body_average_traced(f, q)?.0)
    }

    /// Body average plus, for every cell of `Q` (in range order), the canonical
    /// generator it was merged into and the sign applied.
    pub fn body_average_traced(f: &GridFunction, q: &DyadicCube) -> Result<(Self, Vec<Option<(usize, f64)>>)> {
        let n = f.n();
        check_n(n)?;
        let range = f.check_cube(q).map(|_| q.cell_range(f.finest()))?;
        let inv = 1.0 / range.len() as f64;
        let raw: Vec<f64> = f.values()[range.start * n..range.end * n].iter().map(|v| v * inv).collect();
        let (gens, assign) = canonicalize(n, &raw);
        Ok((Zonotope { n, gens }, assign))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of generators.
    pub fn len(&self) -> usize {
        self.gens.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.gens.is_empty()
    }

    pub fn generator(&self, i: usize) -> &[f64] {
        &self.gens[i * self.n..(i + 1) * self.n]
    }

    pub fn generators(&self) -> impl Iterator<Item = &[f64]> {
        self.gens.chunks(self.n)
    }

    pub fn flat_generators(&self) -> &[f64] {
        &self.gens
    }

    /// `h_K(u) = Σ_i |⟨g_i, u⟩|`.
    pub fn support(&self, u: &[f64]) -> f64 {
        self.generators().map(|g| dot(g, u).abs()).sum()
    }

    /// `c K` (for negative `c` the body `|c| K`, by symmetry).
    pub fn dilate(&self, c: f64) -> Zonotope {
        let c = c.abs();
        if c == 0.0 {
            return Zonotope { n: self.n, gens: Vec::new() };
        }
        Zonotope {
            n: self.n,
            gens: self.gens.iter().map(|v| v * c).collect(),
        }
    }

    /// `M K` for a row-major `n × n` matrix.
    pub fn linear_image(&self, m: &[f64]) -> Result<Zonotope> {
        let n = self.n;
        if m.len() != n * n {
            return Err(Error::DimensionMismatch(format!("matrix needs {} entries", n * n)));
        }
        let mut out = Vec::with_capacity(self.gens.len());
        for g in self.generators() {
            for i in 0..n {
                out.push(dot(&m[i * n..(i + 1) * n], g));
            }
        }
        Zonotope::new(n, &out)
    }

    pub fn max_generator_norm(&self) -> f64 {
        self.generators().map(norm2).fold(0.0, f64::max)
    }

    /// `Σ_i s_i g_i`.
    pub fn point(&self, signs: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.n];
        for (g, s) in self.generators().zip(signs) {
            for (pi, gi) in p.iter_mut().zip(g) {
                *pi += s * gi;
            }
        }
        p
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.n, &self.gens)
    }

    /// Orthonormal bases of the span of the generators and of its complement.
    pub fn span(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.n;
        if self.is_empty() {
            return (DMatrix::zeros(n, 0), DMatrix::identity(n, n));
        }
        // Eigenvectors of G^T G; rank decided on singular values.
        let g = self.matrix();
        let gram = g.transpose() * &g;
        let (vals, vecs) = sym_eigen(&gram);
        let top = vals.last().copied().unwrap_or(0.0).max(0.0).sqrt();
        let svd = g.clone().svd(false, false);
        let sv = svd.singular_values;
        let rank = sv.iter().filter(|s| **s > RANK_TOL * top.max(sv.max())).count();
        let span = vecs.columns(n - rank, rank).into_owned();
        let comp = vecs.columns(0, n - rank).into_owned();
        (span, comp)
    }

    pub fn rank(&self) -> usize {
        self.span().0.ncols()
    }

    pub fn is_full_dimensional(&self) -> bool {
        self.rank() == self.n
    }

    /// Adds `ε e_k` generators, `ε = 1e-10 · max generator norm`.
    pub fn regularized(&self) -> Zonotope {
        let eps = 1e-10 * self.max_generator_norm();
        if eps == 0.0 {
            return self.clone();
        }
        let mut gens = self.gens.clone();
        for k in 0..self.n {
            let mut e = vec![0.0; self.n];
            e[k] = eps;
            gens.extend(e);
        }
        Zonotope::new(self.n, &gens).expect("regularized generators are finite")
    }

    /// Generators written in the coordinates of an orthonormal basis (columns of `u`).
    fn project(&self, u: &DMatrix<f64>) -> Zonotope {
        let r = u.ncols();
        let mut out = Vec::with_capacity(self.len() * r);
        for g in self.generators() {
            for k in 0..r {
                out.push((0..self.n).map(|i| u[(i, k)] * g[i]).sum());
            }
        }
        Zonotope::raw(r, out)
    }

    /// Facet normals; in the degenerate case the in-span normals plus a basis of the complement.
    pub fn facet_normals(&self) -> Normals {
        let n = self.n;
        if n == 1 {
            return Normals {
                dirs: vec![vec![1.0]],
                exact: true,
            };
        }
        let (span, comp) = self.span();
        let r = span.ncols();
        if r < n {
            let mut dirs: Vec<Vec<f64>> = comp.column_iter().map(|c| c.iter().copied().collect()).collect();
            let mut exact = true;
            if r > 0 {
                let sub = self.project(&span).facet_normals();
                exact = sub.exact;
                for a in sub.dirs {
                    dirs.push((0..n).map(|i| (0..r).map(|k| span[(i, k)] * a[k]).sum()).collect());
                }
            }
            return Normals { dirs, exact };
        }
        match n {
            2 => Normals {
                dirs: self
                    .generators()
                    .map(|g| {
                        let l = norm2(g);
                        vec![-g[1] / l, g[0] / l]
                    })
                    .collect(),
                exact: true,
            },
            _ => {
                if self.len() <= PAIR_LIMIT {
                    let mut dirs = Vec::new();
                    for i in 0..self.len() {
                        for j in i + 1..self.len() {
                            let c = cross(self.generator(i), self.generator(j));
                            let l = norm2(&c);
                            if l > 0.0 {
                                dirs.push(c.iter().map(|x| x / l).collect());
                            }
                        }
                    }
                    Normals { dirs, exact: true }
                } else {
                    Normals {
                        dirs: direction_bank(3).to_vec(),
                        exact: false,
                    }
                }
            }
        }
    }

    /// Vertex points and sign patterns; `None` when the set cannot be enumerated exactly.
    pub fn vertex_set(&self) -> Option<VertexSet> {
        let p = self.len();
        if p == 0 {
            return Some(VertexSet {
                points: vec![vec![0.0; self.n]],
                patterns: vec![Vec::new()],
            });
        }
        let patterns = self.vertex_patterns()?;
        let points = patterns.iter().map(|s| self.point(s)).collect();
        Some(VertexSet { points, patterns })
    }

    fn vertex_patterns(&self) -> Option<Vec<Vec<f64>>> {
        let p = self.len();
        match self.n {
            1 => Some(vec![vec![1.0; p], vec![-1.0; p]]),
            2 => {
                let (span, _) = self.span();
                if span.ncols() < 2 {
                    return self.project(&span).vertex_patterns_low();
                }
                Some(planar_patterns(self.generators().map(|g| [g[0], g[1]]).collect()))
            }
            _ => {
                let (span, _) = self.span();
                if span.ncols() < 3 {
                    return self.project(&span).vertex_patterns_low();
                }
                if p > VERTEX_LIMIT {
                    return None;
                }
                Some(spatial_patterns(self))
            }
        }
    }

    fn vertex_patterns_low(&self) -> Option<Vec<Vec<f64>>> {
        let p = self.len();
        match self.n {
            0 => Some(vec![vec![1.0; p]]),
            1 => Some(vec![
                self.generators().map(|g| g[0].signum()).collect(),
                self.generators().map(|g| -g[0].signum()).collect(),
            ]),
            _ => self.vertex_patterns(),
        }
    }
}

fn cross(a: &[f64], b: &[f64]) -> Vec<f64> {
    vec![
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Vertex sign patterns of a planar zonotope: generators ordered by angle in a
/// half-plane, pattern `k` is `+1` on the first `k` generators and `−1` after.
fn planar_patterns(gens: Vec<[f64; 2]>) -> Vec<Vec<f64>> {
    let p = gens.len();
    let mut keyed: Vec<(f64, usize)> = gens
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let (x, y) = if g[0] < 0.0 || (g[0] == 0.0 && g[1] < 0.0) { (-g[0], -g[1]) } else { (g[0], g[1]) };
            (y.atan2(x), i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let flip: Vec<f64> = gens
        .iter()
        .map(|g| if g[0] < 0.0 || (g[0] == 0.0 && g[1] < 0.0) { -1.0 } else { 1.0 })
        .collect();
    let mut out = Vec::with_capacity(2 * p);
    for k in 0..p {
        let mut s = vec![0.0; p];
        for (pos, (_, i)) in keyed.iter().enumerate() {
            s[*i] = if pos < k { flip[*i] } else { -flip[*i] };
        }
        out.push(s.iter().map(|x| -x).collect());
        out.push(s);
    }
    out
}

/// Vertex sign patterns in `R^3` from the great-circle arrangement: every vertex
/// of the arrangement (a normal `g_i × g_j`) and the planar patterns of the
/// generators lying on that circle.
fn spatial_patterns(z: &Zonotope) -> Vec<Vec<f64>> {
    let p = z.len();
    let mut seen: HashSet<Vec<i8>> = HashSet::new();
    let mut out = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            let a = cross(z.generator(i), z.generator(j));
            let la = norm2(&a);
            if la == 0.0 {
                continue;
            }
            let a: Vec<f64> = a.iter().map(|x| x / la).collect();
            let b1 = {
                let g = z.generator(i);
                let l = norm2(g);
                g.iter().map(|x| x / l).collect::<Vec<f64>>()
            };
            let b2 = cross(&a, &b1);
            let mut base = vec![0.0; p];
            let mut plane = Vec::new();
            let mut plane_idx = Vec::new();
            for k in 0..p {
                let g = z.generator(k);
                let s = dot(g, &a);
                if s.abs() <= 1e-12 * norm2(g) || k == i || k == j {
                    plane.push([dot(g, &b1), dot(g, &b2)]);
                    plane_idx.push(k);
                } else {
                    base[k] = s.signum();
                }
            }
            for pat in planar_patterns(plane) {
                let mut s = base.clone();
                for (slot, v) in plane_idx.iter().zip(&pat) {
                    s[*slot] = *v;
                }
                for sign in [1.0, -1.0] {
                    let full: Vec<f64> = s.iter().map(|x| x * sign).collect();
                    let key: Vec<i8> = full.iter().map(|x| *x as i8).collect();
                    if seen.insert(key) {
                        out.push(full);
                    }
                }
            }
        }
    }
    out
}

/// Fixed direction bank: 360 half-circle directions for `n = 2`, a
/// 10^4-point Fibonacci sphere for `n = 3`.
pub fn direction_bank(n: usize) -> &'static [Vec<f64>] {
    static BANK2: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    static BANK3: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    static BANK1: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    match n {
        1 => BANK1.get_or_init(|| vec![vec![1.0]]),
        2 => BANK2.get_or_init(|| {
            (0..360)
                .map(|k| {
                    let t = k as f64 * PI / 360.0;
                    vec![t.cos(), t.sin()]
                })
                .collect()
        }),
        _ => BANK3.get_or_init(|| {
            let m = 10_000;
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..m)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / m as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * i as f64;
                    vec![r * phi.cos(), r * phi.sin(), z]
                })
                .collect()
        }),
    }
}

/// Result of a containment test `c H ⊂ K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Containment {
    pub contained: bool,
    /// `max_u c h_H(u) / h_K(u)` over the tested directions (∞ when `h_K(u) = 0 < c h_H(u)`).
    pub ratio: f64,
    /// A direction `u` with `c h_H(u) > h_K(u)`, when not contained.
    pub certificate: Option<Vec<f64>>,
    /// The tested directions included every facet normal of `K`.
    pub exact: bool,
}

/// Tests `c H ⊂ K` through support functions over the facet normals of `K`
/// (relative slack `tol`).
pub fn contains(k: &Zonotope, h: &Zonotope, c: f64, tol: f64) -> Result<Containment> {
    if k.n != h.n {
        return Err(Error::DimensionMismatch(format!("bodies in R^{} and R^{}", k.n, h.n)));
    }
    let normals = k.facet_normals();
    let floor = 1e-12 * (h.max_generator_norm() * h.len() as f64).max(f64::MIN_POSITIVE) * c.abs();
    let mut ratio = 0.0f64;
    let mut cert = None;
    for u in normals.dirs.iter().chain(if normals.exact { [].iter() } else { direction_bank(k.n).iter() }) {
        let hk = k.support(u);
        let hh = c.abs() * h.support(u);
        let r = if hk > 0.0 {
            hh / hk
        } else if hh > floor {
            f64::INFINITY
        } else {
            0.0
        };
        if r > ratio {
            ratio = r;
            if hh > hk * (1.0 + tol) + floor {
                cert = Some(u.clone());
            }
        }
    }
    Ok(Containment {
        contained: cert.is_none(),
        ratio,
        certificate: cert,
        exact: normals.exact,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProductMethod {
    Trivial,
    SignEnumeration,
    VertexAscent,
    SampledAscent,
}

/// Right endpoint of the Minkowski product `KH = {k·h : k ∈ K, h ∈ H}` with its extremizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinkowskiProduct {
    pub value: f64,
    /// Certified upper bound (equal to `value` when exact).
    pub upper: f64,
    pub exact: bool,
    pub method: ProductMethod,
    /// Signs on the generators of `K` and `H` realizing `value`.
    pub signs_k: Vec<f64>,
    pub signs_h: Vec<f64>,
}

fn gram(k: &Zonotope, h: &Zonotope) -> Vec<f64> {
    let (p, q) = (k.len(), h.len());
    let mut c = vec![0.0; p * q];
    for i in 0..p {
        for j in 0..q {
            c[i * q + j] = dot(k.generator(i), h.generator(j));
        }
    }
    c
}

fn sign_of(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Exact product by enumerating sign patterns of the smaller body (Gray code).
pub fn minkowski_enumerate(k: &Zonotope, h: &Zonotope) -> Result<MinkowskiProduct> {
    if k.n != h.n {
        return Err(Error::DimensionMismatch(format!("bodies in R^{} and R^{}", k.n, h.n)));
    }
    if k.len() > h.len() {
        let r = minkowski_enumerate(h, k)?;
        return Ok(MinkowskiProduct {
            signs_k: r.signs_h,
            signs_h: r.signs_k,
            ..r
        });
    }
    let (p, q) = (k.len(), h.len());
    if p > ENUM_LIMIT {
        return Err(Error::SizeOverflow { size: p, limit: ENUM_LIMIT });
    }
    if p == 0 || q == 0 {
        return Ok(trivial(p, q));
    }
    let c = gram(k, h);
    let mut s = vec![1.0; p];
    let mut v: Vec<f64> = (0..q).map(|j| (0..p).map(|i| c[i * q + j]).sum()).collect();
    let mut best = v.iter().map(|x| x.abs()).sum::<f64>();
    let mut best_s = s.clone();
    for step in 1u64..(1u64 << (p - 1)) {
        let i = step.trailing_zeros() as usize;
        s[i] = -s[i];
        for j in 0..q {
            v[j] += 2.0 * s[i] * c[i * q + j];
        }
        let val: f64 = v.iter().map(|x| x.abs()).sum();
        if val > best {
            best = val;
            best_s = s.clone();
        }
    }
    let t = dual_signs(&c, &best_s, q);
    let value = exact_value(&c, &best_s, &t, q);
    Ok(MinkowskiProduct {
        value,
        upper: value,
        exact: true,
        method: ProductMethod::SignEnumeration,
        signs_k: best_s,
        signs_h: t,
    })
}

fn trivial(p: usize, q: usize) -> MinkowskiProduct {
    MinkowskiProduct {
        value: 0.0,
        upper: 0.0,
        exact: true,
        method: ProductMethod::Trivial,
        signs_k: vec![1.0; p],
        signs_h: vec![1.0; q],
    }
}

fn dual_signs(c: &[f64], s: &[f64], q: usize) -> Vec<f64> {
    (0..q)
        .map(|j| sign_of(s.iter().enumerate().map(|(i, si)| si * c[i * q + j]).sum()))
        .collect()
}

fn primal_signs(c: &[f64], t: &[f64], p: usize, q: usize) -> Vec<f64> {
    (0..p)
        .map(|i| sign_of(t.iter().enumerate().map(|(j, tj)| tj * c[i * q + j]).sum()))
        .collect()
}

fn exact_value(c: &[f64], s: &[f64], t: &[f64], q: usize) -> f64 {
    let mut total = 0.0;
    for (i, si) in s.iter().enumerate() {
        for (j, tj) in t.iter().enumerate() {
            total += si * tj * c[i * q + j];
        }
    }
    total
}

/// Alternating sign ascent from the given patterns of `K` (each a local search
/// `t = sign(Cᵀs)`, `s = sign(C t)` until no improvement).
pub fn minkowski_ascent(k: &Zonotope, h: &Zonotope, starts: &[Vec<f64>]) -> Result<MinkowskiProduct> {
    if k.n != h.n {
        return Err(Error::DimensionMismatch(format!("bodies in R^{} and R^{}", k.n, h.n)));
    }
    let (p, q) = (k.len(), h.len());
    if p == 0 || q == 0 {
        return Ok(trivial(p, q));
    }
    let c = gram(k, h);
    let mut best = (f64::NEG_INFINITY, vec![], vec![]);
    for s0 in starts {
        let mut s = s0.clone();
        let mut t = dual_signs(&c, &s, q);
        let mut val = exact_value(&c, &s, &t, q);
        for _ in 0..1000 {
            let s2 = primal_signs(&c, &t, p, q);
            let t2 = dual_signs(&c, &s2, q);
            let v2 = exact_value(&c, &s2, &t2, q);
            if v2 <= val * (1.0 + 1e-15) {
                break;
            }
            s = s2;
            t = t2;
            val = v2;
        }
        if val > best.0 {
            best = (val, s, t);
        }
    }
    Ok(MinkowskiProduct {
        value: best.0.max(0.0),
        upper: f64::INFINITY,
        exact: false,
        method: ProductMethod::SampledAscent,
        signs_k: best.1,
        signs_h: best.2,
    })
}

/// The Minkowski product `KH` (right endpoint).
///
/// Exact through the vertex set of the smaller body whenever it can be enumerated
/// (always for `n ≤ 2`), else by sign enumeration for at most 20 generators, else a
/// sampled ascent with the upper bound `min(Σ|⟨g_i,h_j⟩|, n ‖A_Kᵀ A_H‖)`.
pub fn minkowski_product(k: &Zonotope, h: &Zonotope) -> Result<MinkowskiProduct> {
    if k.n != h.n {
        return Err(Error::DimensionMismatch(format!("bodies in R^{} and R^{}", k.n, h.n)));
    }
    if k.is_empty() || h.is_empty() {
        return Ok(trivial(k.len(), h.len()));
    }
    if k.len() > h.len() {
        let r = minkowski_product(h, k)?;
        return Ok(MinkowskiProduct {
            signs_k: r.signs_h,
            signs_h: r.signs_k,
            ..r
        });
    }
    if let Some(vs) = k.vertex_set() {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (idx, v) in vs.points.iter().enumerate() {
            let val = h.support(v);
            if val > best.0 {
                best = (val, idx);
            }
        }
        let s = vs.patterns[best.1].clone();
        let c = gram(k, h);
        let t = dual_signs(&c, &s, h.len());
        let value = exact_value(&c, &s, &t, h.len()).max(best.0);
        return Ok(MinkowskiProduct {
            value,
            upper: value,
            exact: true,
            method: ProductMethod::VertexAscent,
            signs_k: s,
            signs_h: t,
        });
    }
    if k.len() <= ENUM_LIMIT && (h.len() << k.len()) <= (1usize << 28) {
        return minkowski_enumerate(k, h);
    }
    let starts: Vec<Vec<f64>> = direction_bank(k.n)
        .iter()
        .step_by(25)
        .map(|u| k.generators().map(|g| sign_of(dot(g, u))).collect())
        .collect();
    let mut r = minkowski_ascent(k, h, &starts)?;
    let c = gram(k, h);
    let crude: f64 = c.iter().map(|x| x.abs()).sum();
    let john_bound = match (john_ellipsoid(k), john_ellipsoid(h)) {
        (Ok(ek), Ok(eh)) => {
            let prod = ek.shape.transpose() * &eh.shape;
            (ek.kappa * eh.kappa).sqrt() * dense_spectral_norm(&prod)
        }
        _ => f64::INFINITY,
    };
    r.upper = crude.min(john_bound).max(r.value);
    Ok(r)
}

/// Ellipsoid `A · (unit ball)` with symmetric PSD shape `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub n: usize,
    pub shape: DMatrix<f64>,
    /// Certified outer factor: `K ⊂ sqrt(kappa) · E` (`kappa → n` at convergence).
    pub kappa: f64,
    /// The body has rank below `n`; the ellipsoid lives in its span.
    pub degenerate: bool,
    /// Facet normals were enumerated exactly, so `E ⊂ K` is certified.
    pub exact: bool,
    pub iterations: usize,
}

impl Ellipsoid {
    /// `h_E(u) = |A u|`.
    pub fn support(&self, u: &[f64]) -> f64 {
        let v = &self.shape * nalgebra::DVector::from_column_slice(u);
        v.norm()
    }

    /// Shape matrix as a row-major list.
    pub fn shape_rows(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.push(self.shape[(i, j)]);
            }
        }
        out
    }
}

/// Centered minimum-volume enclosing ellipsoid of `±c_i` (Todd–Yildirim with away
/// steps). Returns `X = Σ u_i c_i c_iᵀ`, `κ = max_i c_iᵀ X⁻¹ c_i` and the iteration count;
/// `{y : yᵀ X⁻¹ y ≤ κ}` contains every point.
fn mvee_centered(points: &[Vec<f64>], n: usize, eps: f64, max_iter: usize) -> Result<(DMatrix<f64>, f64, usize)> {
    let m = points.len();
    let nf = n as f64;
    let mut u = vec![1.0 / m as f64; m];
    let build = |u: &[f64]| -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<f64>)> {
        let mut x = DMatrix::zeros(n, n);
        for (c, ui) in points.iter().zip(u) {
            if *ui == 0.0 {
                continue;
            }
            for a in 0..n {
                for b in 0..n {
                    x[(a, b)] += ui * c[a] * c[b];
                }
            }
        }
        let xinv = x
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("enclosing-ellipsoid moment matrix is singular".into()))?;
        let w = points.iter().map(|c| quad(&xinv, c)).collect();
        Ok((x, xinv, w))
    };
    let (_, mut xinv, mut w) = build(&u)?;
    let mut iters = 0;
    while iters < max_iter {
        iters += 1;
        let (jp, wmax) = w
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |a, (i, v)| if *v > a.1 { (i, *v) } else { a });
        let (jm, wmin) = w
            .iter()
            .enumerate()
            .filter(|(i, _)| u[*i] > 0.0)
            .fold((0, f64::INFINITY), |a, (i, v)| if *v < a.1 { (i, *v) } else { a });
        let up = wmax / nf - 1.0;
        let down = 1.0 - wmin / nf;
        if up <= eps && down <= eps {
            break;
        }
        let (j, beta) = if up >= down {
            (jp, (wmax - nf) / (nf * (wmax - 1.0)))
        } else {
            let cap = -u[jm] / (1.0 - u[jm]);
            let b = if wmin <= 1.0 { cap } else { ((wmin - nf) / (nf * (wmin - 1.0))).max(cap) };
            (jm, b)
        };
        if !beta.is_finite() || beta == 0.0 {
            break;
        }
        for (i, ui) in u.iter_mut().enumerate() {
            *ui *= 1.0 - beta;
            if i == j {
                *ui += beta;
            }
            if *ui < 0.0 {
                *ui = 0.0;
            }
        }
        if iters % 200 == 0 {
            let (_, xi, wi) = build(&u)?;
            xinv = xi;
            w = wi;
            continue;
        }
        // Sherman–Morrison update of X⁻¹ and of the w_i.
        let r = beta / (1.0 - beta);
        let cj = &points[j];
        let xc: Vec<f64> = (0..n).map(|a| (0..n).map(|b| xinv[(a, b)] * cj[b]).sum()).collect();
        let gamma = r / (1.0 + r * w[j]);
        let scale = 1.0 / (1.0 - beta);
        for (wi, ci) in w.iter_mut().zip(points) {
            let t = dot(ci, &xc);
            *wi = scale * (*wi - gamma * t * t);
        }
        for a in 0..n {
            for b in 0..n {
                xinv[(a, b)] = scale * (xinv[(a, b)] - gamma * xc[a] * xc[b]);
            }
        }
    }
    let (x, _, w) = build(&u)?;
    let kappa = w.iter().fold(0.0f64, |a, b| a.max(*b));
    Ok((x, kappa, iters))
}

fn quad(m: &DMatrix<f64>, c: &[f64]) -> f64 {
    let n = c.len();
    let mut s = 0.0;
    for a in 0..n {
        for b in 0..n {
            s += c[a] * m[(a, b)] * c[b];
        }
    }
    s
}

/// Maximal-volume inscribed ellipsoid of a symmetric zonotope.
///
/// Computed as the polar of the minimum-volume ellipsoid enclosing the polar
/// vertices `a_i / h_K(a_i)`; the result satisfies `E ⊂ K` (exactly when the facet
/// normals are complete) and `K ⊂ sqrt(kappa) E`.
pub fn john_ellipsoid(k: &Zonotope) -> Result<Ellipsoid> {
    let n = k.n;
    if k.is_empty() {
        return Ok(Ellipsoid {
            n,
            shape: DMatrix::zeros(n, n),
            kappa: n as f64,
            degenerate: true,
            exact: true,
            iterations: 0,
        });
    }
    if n == 1 {
        return Ok(Ellipsoid {
            n,
            shape: DMatrix::from_element(1, 1, k.support(&[1.0])),
            kappa: 1.0,
            degenerate: false,
            exact: true,
            iterations: 0,
        });
    }
    let (span, _) = k.span();
    let r = span.ncols();
    if r < n {
        let sub = john_ellipsoid(&k.project(&span))?;
        let shape = &span * &sub.shape * span.transpose();
        return Ok(Ellipsoid {
            n,
            shape,
            kappa: sub.kappa,
            degenerate: true,
            exact: sub.exact,
            iterations: sub.iterations,
        });
    }
    let normals = k.facet_normals();
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(normals.dirs.len());
    for a in &normals.dirs {
        let h = k.support(a);
        if h > 0.0 {
            pts.push(a.iter().map(|x| x / h).collect());
        }
    }
    let (x, kappa, iterations) = mvee_centered(&pts, n, 1e-9, 200_000)?;
    let shape = spd_inv_sqrt(&(x * kappa))?;
    Ok(Ellipsoid {
        n,
        shape,
        kappa,
        degenerate: false,
        exact: normals.exact,
        iterations,
    })
}

/// Margins of the sandwich `E ⊂ K ⊂ sqrt(n) E`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sandwich {
    /// `max_a h_E(a) / h_K(a)` over facet normals; `≤ 1` means `E ⊂ K`.
    pub inner: f64,
    /// `max_v |A⁻¹ v| / sqrt(n)` over vertices of `K`; `≤ 1` means `K ⊂ sqrt(n) E`.
    pub outer: f64,
    pub exact: bool,
}

impl Sandwich {
    pub fn holds(&self, tol: f64) -> bool {
        self.inner <= 1.0 + tol && self.outer <= 1.0 + tol
    }
}

/// Checks `E ⊂ K ⊂ sqrt(n) E`, inside the span of `K` when it is degenerate.
pub fn john_sandwich(k: &Zonotope, e: &Ellipsoid) -> Result<Sandwich> {
    if k.n != e.n {
        return Err(Error::DimensionMismatch("body and ellipsoid dimensions differ".into()));
    }
    let (span, _) = k.span();
    let r = span.ncols();
    if r == 0 {
        return Ok(Sandwich {
            inner: 0.0,
            outer: 0.0,
            exact: true,
        });
    }
    let kp = k.project(&span);
    let shape = span.transpose() * &e.shape * &span;
    let rf = r as f64;
    let normals = kp.facet_normals();
    let mut inner = 0.0f64;
    for a in &normals.dirs {
        let he = (&shape * nalgebra::DVector::from_column_slice(a)).norm();
        let hk = kp.support(a);
        inner = inner.max(if hk > 0.0 { he / hk } else { f64::INFINITY });
    }
    let inv = shape
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("ellipsoid is flat inside the span of the body".into()))?;
    let (outer, exact_outer) = match kp.vertex_set() {
        Some(vs) => (
            vs.points
                .iter()
                .map(|v| (&inv * nalgebra::DVector::from_column_slice(v)).norm() / rf.sqrt())
                .fold(0.0f64, f64::max),
            true,
        ),
        None => (
            direction_bank(r)
                .iter()
                .map(|u| kp.support(u) / (rf.sqrt() * (&shape * nalgebra::DVector::from_column_slice(u)).norm()))
                .fold(0.0f64, f64::max),
            false,
        ),
    };
    Ok(Sandwich {
        inner,
        outer,
        exact: normals.exact && exact_outer,
    })
}

/// Stopping cubes of a vector function with their exactness flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorStopping {
    pub cubes: Vec<DyadicCube>,
    /// Non-containment was decided over every facet normal of `⟨f⟩_Q`.
    pub exact: bool,
    pub normals: usize,
}

/// Default dilation `A = 2^8 n²`.
pub fn default_dilation(n: usize) -> f64 {
    256.0 * (n * n) as f64
}

/// Maximal dyadic subcubes `I ⊊ Q` with `⟨f⟩_I ⊄ A⟨f⟩_Q`.
///
/// Non-containment is tested over the facet normals `a` of `⟨f⟩_Q` as
/// `h_I(a) > A h_Q(a)(1 + 1e-12) + 1e-12 ⟨|f|⟩_I`.
pub fn vector_stopping(f: &GridFunction, q: &DyadicCube, a: f64) -> Result<VectorStopping> {
    let n = f.n();
    check_n(n)?;
    if !(a > (n * n) as f64) {
        return Err(Error::InvalidParameter(format!("dilation {a} must exceed n² = {}", n * n)));
    }
    let kq = Zonotope::body_average(f, q)?;
    let normals = kq.facet_normals();
    let finest = f.finest();
    let range = q.cell_range(finest);
    let count = range.len();
    let rel_max = finest - q.depth();
    let d = f.dim() as u32;
    let fan = 1usize << d;
    // Relative levels 1..=rel_max that can violate: |Q|/|I| > A.
    let min_rel = (1..=rel_max).find(|r| (1u64 << (d * r)) as f64 > a);
    let mut violated: Vec<Vec<bool>> = (0..=rel_max).map(|r| vec![false; 1usize << (d * r)]).collect();
    if let Some(min_rel) = min_rel {
        let mag = level_averages(f, range.clone(), fan, rel_max, |v| norm2(v));
        let mut buf = vec![0.0; count];
        for u in &normals.dirs {
            let hq = kq.support(u);
            let threshold = a * hq * (1.0 + 1e-12);
            for (c, slot) in range.clone().zip(buf.iter_mut()) {
                *slot = dot(f.value(c), u).abs();
            }
            let mut level = buf.clone();
            for rel in (1..=rel_max).rev() {
                if rel >= min_rel {
                    let cells_i = (count / level.len()) as f64;
                    for (idx, s) in level.iter().enumerate() {
                        if s / cells_i > threshold + 1e-12 * mag[rel as usize][idx] {
                            violated[rel as usize][idx] = true;
                        }
                    }
                }
                level = level.chunks(fan).map(|c| c.iter().sum()).collect();
            }
        }
    }
    let mut cubes = Vec::new();
    let mut stack: Vec<(u32, usize)> = (0..fan).rev().map(|c| (1u32, c)).collect();
    if rel_max == 0 {
        stack.clear();
    }
    while let Some((rel, idx)) = stack.pop() {
        if violated[rel as usize][idx] {
            cubes.push(q.subcube(rel, idx as u64));
            continue;
        }
        if rel < rel_max {
            for c in (0..fan).rev() {
                stack.push((rel + 1, idx * fan + c));
            }
        }
    }
    cubes.sort();
    Ok(VectorStopping {
        cubes,
        exact: normals.exact,
        normals: normals.dirs.len(),
    })
}

/// Averages of `g(f(cell))` over the subcubes of `Q` at every relative level.
fn level_averages(
    f: &GridFunction,
    range: std::ops::Range<usize>,
    fan: usize,
    rel_max: u32,
    g: impl Fn(&[f64]) -> f64,
) -> Vec<Vec<f64>> {
    let mut level: Vec<f64> = range.map(|c| g(f.value(c))).collect();
    let count = level.len();
    let mut out = vec![Vec::new(); rel_max as usize + 1];
    for rel in (0..=rel_max).rev() {
        let cells_i = (count / level.len()) as f64;
        out[rel as usize] = level.iter().map(|s| s / cells_i).collect();
        level = level.chunks(fan).map(|c| c.iter().sum()).collect();
    }
    out
}

/// Diagnostics for a vector stopping family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorStoppingReport {
    pub dilation: f64,
    /// `max_I` of the smallest `t` with `⟨f⟩_I ⊂ t ⟨f⟩_Q`, divided by `2^d A`.
    pub containment_ratio: f64,
    pub containment_exact: bool,
    /// `Σ|I| / |Q|` and the bound `n²/A`.
    pub packing: f64,
    pub packing_bound: f64,
    pub packing_ok: bool,
    /// Coordinate type of every cube after John normalization (`None` when no coordinate qualifies).
    pub types: Vec<Option<usize>>,
    /// `Σ_{I of type j}|I| / |Q|` per coordinate, against the bound `n/A`.
    pub type_packing: Vec<f64>,
    pub degenerate_body: bool,
}

/// Checks the containment `⟨f⟩_I ⊂ 2^d A ⟨f⟩_Q` and the packing `Σ|I| < (n²/A)|Q|`.
pub fn check_vector_stopping(
    f: &GridFunction,
    q: &DyadicCube,
    a: f64,
    cubes: &[DyadicCube],
) -> Result<VectorStoppingReport> {
    let n = f.n();
    let finest = f.finest();
    let kq = Zonotope::body_average(f, q)?;
    let dil = (1u64 << f.dim()) as f64 * a;
    let mut ratio = 0.0f64;
    let mut exact = true;
    for i in cubes {
        let ki = Zonotope::body_average(f, i)?;
        let c = contains(&kq, &ki, 1.0, 0.0)?;
        exact &= c.exact;
        ratio = ratio.max(c.ratio / dil);
    }
    let covered: usize = cubes.iter().map(|i| i.cell_count(finest)).sum();
    let total = q.cell_count(finest);
    let packing_ok = (covered as f64) * a < ((n * n) as f64) * total as f64;

    let mut degenerate = false;
    let body = if kq.is_full_dimensional() {
        kq.clone()
    } else {
        degenerate = true;
        kq.regularized()
    };
    let mut types = Vec::with_capacity(cubes.len());
    let mut type_packing = vec![0.0; n];
    if let Ok(e) = john_ellipsoid(&body) {
        if let Ok(inv) = e.shape.clone().try_inverse().ok_or(()) {
            let rows: Vec<f64> = (0..n * n).map(|k| inv[(k / n, k % n)]).collect();
            let g = f.linear_map(&rows, n)?;
            for i in cubes {
                let mut best = (0usize, 0.0f64);
                for j in 0..n {
                    let avg = i.cell_range(finest).map(|c| g.value(c)[j].abs()).sum::<f64>() / i.cell_count(finest) as f64;
                    if avg > best.1 {
                        best = (j, avg);
                    }
                }
                if (n as f64).sqrt() * best.1 > a {
                    types.push(Some(best.0));
                    type_packing[best.0] += i.cell_count(finest) as f64 / total as f64;
                } else {
                    types.push(None);
                }
            }
        }
    }
    if types.len() != cubes.len() {
        types = vec![None; cubes.len()];
    }
    Ok(VectorStoppingReport {
        dilation: a,
        containment_ratio: ratio,
        containment_exact: exact,
        packing: covered as f64 / total as f64,
        packing_bound: (n * n) as f64 / a,
        packing_ok,
        types,
        type_packing,
        degenerate_body: degenerate,
    })
}
