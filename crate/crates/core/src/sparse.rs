//! Stopping cubes, sparse collections and sparse forms.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convex::{minkowski_product, vector_stopping, Zonotope};
use crate::dyadic::{check_cube, check_grid, DyadicCube, GridFunction, Pyramid};
use crate::error::{Error, Result};

/// Default stopping threshold `2^8`.
pub const DEFAULT_LAMBDA: f64 = 256.0;

/// Unsigned mass pyramids of a scalar pair, shared by every stopping query.
#[derive(Debug, Clone)]
pub struct MassPair {
    m1: Pyramid,
    m2: Pyramid,
    cell: f64,
}

impl MassPair {
    pub fn new(f1: &GridFunction, f2: &GridFunction) -> Result<Self> {
        f1.check_same_grid(f2)?;
        for f in [f1, f2] {
            if f.n() != 1 {
                return Err(Error::DimensionMismatch(format!(
                    "scalar stopping needs n = 1, got n = {}",
                    f.n()
                )));
            }
        }
        Ok(MassPair {
            m1: f1.mass_pyramid(),
            m2: f2.mass_pyramid(),
            cell: f1.cell_measure(),
        })
    }

    pub fn dim(&self) -> usize {
        self.m1.dim()
    }

    pub fn finest(&self) -> u32 {
        self.m1.finest()
    }

    /// `(⟨f1⟩_Q, ⟨f2⟩_Q)`.
    pub fn averages(&self, q: &DyadicCube) -> (f64, f64) {
        (self.m1.average(q), self.m2.average(q))
    }

    pub fn product(&self, q: &DyadicCube) -> f64 {
        let (a, b) = self.averages(q);
        a * b
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 1.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "stopping threshold {lambda} must exceed 1"
        )));
    }
    Ok(())
}

/// Maximal strict dyadic subcubes `I ⊊ Q` with `⟨f_j⟩_I > λ⟨f_j⟩_Q` for `j = 1` or `j = 2`.
pub fn stopping_children(
    f1: &GridFunction,
    f2: &GridFunction,
    q: &DyadicCube,
    lambda: f64,
) -> Result<Vec<DyadicCube>> {
    let masses = MassPair::new(f1, f2)?;
    stopping_children_prepared(&masses, q, lambda)
}

pub fn stopping_children_prepared(masses: &MassPair, q: &DyadicCube, lambda: f64) -> Result<Vec<DyadicCube>> {
    check_lambda(lambda)?;
    check_cube(q, masses.dim(), masses.finest())?;
    let finest = masses.finest();
    let (a1, a2) = masses.averages(q);
    let (t1, t2) = (lambda * a1, lambda * a2);
    let mut out = Vec::new();
    let mut stack: Vec<DyadicCube> = if q.depth() < finest {
        (0..q.num_children()).rev().map(|c| q.child(c)).collect()
    } else {
        Vec::new()
    };
    while let Some(i) = stack.pop() {
        let (b1, b2) = masses.averages(&i);
        if b1 > t1 || b2 > t2 {
            out.push(i);
            continue;
        }
        if i.depth() == finest {
            continue;
        }
        // A subcube I' can only stop if its mass exceeds t_j |I'| ≥ t_j |cell|.
        let mass1 = masses.m1.scalar(&i);
        let mass2 = masses.m2.scalar(&i);
        if mass1 <= t1 * masses.cell && mass2 <= t2 * masses.cell {
            continue;
        }
        for c in (0..i.num_children()).rev() {
            stack.push(i.child(c));
        }
    }
    out.sort();
    Ok(out)
}

/// A node of a sparse collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseNode {
    pub cube: DyadicCube,
    /// Generation: 0 for the root, 1 for its children, `n + 1` for the `n`-th stopping layer.
    pub layer: u32,
    /// Root child (Morton position) whose tree contains the node; `None` for the root.
    pub tree: Option<u32>,
    /// Maximal proper members of the collection inside `cube`.
    pub children: Vec<DyadicCube>,
    /// `|E_Q|` in finest cells, `E_Q = Q ∖ ⋃ children`.
    pub witness_cells: usize,
}

/// Finite collection of dyadic cubes organized as an inclusion forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCollection {
    dim: usize,
    finest: u32,
    nodes: BTreeMap<DyadicCube, SparseNode>,
}

impl SparseCollection {
    /// Collection from an arbitrary cube list; the forest structure is derived.
    pub fn from_cubes(dim: usize, finest: u32, cubes: &[DyadicCube]) -> Result<Self> {
        check_grid(dim, finest)?;
        let mut set = BTreeSet::new();
        for q in cubes {
            check_cube(q, dim, finest)?;
            if !set.insert(*q) {
                return Err(Error::Unsupported(format!(
                    "cube {q:?} appears twice; the collection is not a forest under inclusion"
                )));
            }
        }
        let mut parents: BTreeMap<DyadicCube, Option<DyadicCube>> = BTreeMap::new();
        for q in &set {
            let parent = (0..q.depth())
                .rev()
                .map(|d| q.ancestor(d).unwrap())
                .find(|a| set.contains(a));
            parents.insert(*q, parent);
        }
        let mut children: BTreeMap<DyadicCube, Vec<DyadicCube>> = BTreeMap::new();
        for (q, p) in &parents {
            if let Some(p) = p {
                children.entry(*p).or_default().push(*q);
            }
        }
        let mut nodes = BTreeMap::new();
        for q in &set {
            let mut layer = 0;
            let mut cur = *q;
            while let Some(p) = parents[&cur] {
                layer += 1;
                cur = p;
            }
            let ch = children.remove(q).unwrap_or_default();
            let covered: usize = ch.iter().map(|c| c.cell_count(finest)).sum();
            nodes.insert(
                *q,
                SparseNode {
                    cube: *q,
                    layer,
                    tree: None,
                    children: ch,
                    witness_cells: q.cell_count(finest) - covered,
                },
            );
        }
        Ok(SparseCollection { dim, finest, nodes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn finest(&self) -> u32 {
        self.finest
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, q: &DyadicCube) -> bool {
        self.nodes.contains_key(q)
    }

    pub fn cubes(&self) -> impl Iterator<Item = &DyadicCube> {
        self.nodes.keys()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SparseNode> {
        self.nodes.values()
    }

    pub fn node(&self, q: &DyadicCube) -> Option<&SparseNode> {
        self.nodes.get(q)
    }

    /// Stored witness `E_Q` as a sorted list of finest cells.
    pub fn witness_cells(&self, q: &DyadicCube) -> Option<Vec<usize>> {
        let node = self.nodes.get(q)?;
        let mut covered: Vec<std::ops::Range<usize>> =
            node.children.iter().map(|c| c.cell_range(self.finest)).collect();
        covered.sort_by_key(|r| r.start);
        let mut out = Vec::with_capacity(node.witness_cells);
        let mut it = covered.iter().peekable();
        for cell in q.cell_range(self.finest) {
            while it.peek().is_some_and(|r| r.end <= cell) {
                it.next();
            }
            if it.peek().is_some_and(|r| r.contains(&cell)) {
                continue;
            }
            out.push(cell);
        }
        Some(out)
    }

    /// Largest per-node packing ratio `Σ_{children}|I| / |Q|` over nodes other than the root.
    pub fn max_packing_ratio(&self) -> f64 {
        self.nodes
            .values()
            .filter(|n| n.layer > 0)
            .map(|n| 1.0 - n.witness_cells as f64 / n.cube.cell_count(self.finest) as f64)
            .fold(0.0, f64::max)
    }

    /// Cubes grouped by layer.
    pub fn layers(&self) -> BTreeMap<u32, Vec<DyadicCube>> {
        let mut out: BTreeMap<u32, Vec<DyadicCube>> = BTreeMap::new();
        for n in self.nodes.values() {
            out.entry(n.layer).or_default().push(n.cube);
        }
        out
    }
}

/// Builds `{root} ∪ children(root) ∪` successive stopping layers with a caller-supplied rule.
///
/// `rule(Q)` must return pairwise disjoint strict subcubes of `Q`.
pub fn build_with_rule(
    dim: usize,
    finest: u32,
    mut rule: impl FnMut(&DyadicCube) -> Result<Vec<DyadicCube>>,
) -> Result<SparseCollection> {
    check_grid(dim, finest)?;
    let root = DyadicCube::root(dim);
    let mut nodes = BTreeMap::new();
    let top: Vec<DyadicCube> = if finest == 0 { Vec::new() } else { root.children(finest)? };
    nodes.insert(
        root,
        SparseNode {
            cube: root,
            layer: 0,
            tree: None,
            children: top.clone(),
            witness_cells: if top.is_empty() { 1 } else { 0 },
        },
    );
    for (t, q) in top.iter().enumerate() {
        let mut layer = vec![*q];
        let mut gen = 1;
        while !layer.is_empty() {
            let mut next = Vec::new();
            for p in &layer {
                let stop = rule(p)?;
                let mut covered = 0usize;
                for i in &stop {
                    if !p.strictly_contains(i) {
                        return Err(Error::Collection(format!(
                            "stopping cube {i:?} is not a strict subcube of {p:?}"
                        )));
                    }
                    covered += i.cell_count(finest);
                }
                if covered > p.cell_count(finest) {
                    return Err(Error::Collection(format!("stopping cubes of {p:?} overlap")));
                }
                nodes.insert(
                    *p,
                    SparseNode {
                        cube: *p,
                        layer: gen,
                        tree: Some(t as u32),
                        children: stop.clone(),
                        witness_cells: p.cell_count(finest) - covered,
                    },
                );
                next.extend(stop);
            }
            layer = next;
            gen += 1;
        }
    }
    Ok(SparseCollection { dim, finest, nodes })
}

/// The stopping-time collection `𝒮_𝒟` of a scalar pair with threshold `λ`.
pub fn build_sparse_collection(f1: &GridFunction, f2: &GridFunction, lambda: f64) -> Result<SparseCollection> {
    check_lambda(lambda)?;
    let masses = MassPair::new(f1, f2)?;
    build_with_rule(f1.dim(), f1.finest(), |q| stopping_children_prepared(&masses, q, lambda))
}

/// Drops duplicates and cubes strictly contained in another cube of the list.
pub fn maximal_cubes(mut cubes: Vec<DyadicCube>) -> Vec<DyadicCube> {
    cubes.sort_by(|a, b| a.depth().cmp(&b.depth()).then(a.cmp(b)));
    cubes.dedup();
    let mut kept: BTreeSet<DyadicCube> = BTreeSet::new();
    for q in cubes {
        if !(0..q.depth()).any(|d| kept.contains(&q.ancestor(d).unwrap())) {
            kept.insert(q);
        }
    }
    kept.into_iter().collect()
}

/// Maximal elements of the vector stopping families of `f1` and `f2` in `Q`,
/// with the exactness flag of the underlying containment tests.
pub fn vector_stopping_children(
    f1: &GridFunction,
    f2: &GridFunction,
    q: &DyadicCube,
    a: f64,
) -> Result<(Vec<DyadicCube>, bool)> {
    f1.check_compatible(f2)?;
    let s1 = vector_stopping(f1, q, a)?;
    let s2 = vector_stopping(f2, q, a)?;
    let mut all = s1.cubes;
    all.extend(s2.cubes);
    Ok((maximal_cubes(all), s1.exact && s2.exact))
}

/// The stopping-time collection built with the vector rule at dilation `A`.
pub fn build_vector_collection(f1: &GridFunction, f2: &GridFunction, a: f64) -> Result<(SparseCollection, bool)> {
    f1.check_compatible(f2)?;
    let mut exact = true;
    let s = build_with_rule(f1.dim(), f1.finest(), |q| {
        let (c, e) = vector_stopping_children(f1, f2, q, a)?;
        exact &= e;
        Ok(c)
    })?;
    Ok((s, exact))
}

/// Outcome of [`verify_sparse`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub cubes: usize,
    /// Largest `η` admitting disjoint `E_Q ⊂ Q` with `|E_Q| ≥ η|Q|`:
    /// `min_Q |Q| / Σ_{Q' ⊆ Q} |Q'|`.
    pub feasible_eta: f64,
    /// Cube attaining `feasible_eta`.
    pub critical_cube: Option<DyadicCube>,
    /// The greedy witness built at `feasible_eta` passed the disjointness and size checks.
    pub greedy_witness_ok: bool,
    /// Stored witnesses `E_Q` are pairwise disjoint (cell-exact).
    pub stored_disjoint: bool,
    /// `min |E_Q| / |Q|` over stored witnesses, the root excluded when the collection has more than one cube.
    pub stored_eta: f64,
    pub requested_eta: f64,
    pub passed: bool,
}

/// Recomputes a disjoint witness family and the largest feasible `η`.
pub fn verify_sparse(s: &SparseCollection, eta: f64) -> Result<SparsityReport> {
    let finest = s.finest;
    let cubes: Vec<DyadicCube> = s.nodes.keys().copied().collect();
    if cubes.is_empty() {
        return Ok(SparsityReport {
            cubes: 0,
            feasible_eta: 1.0,
            critical_cube: None,
            greedy_witness_ok: true,
            stored_disjoint: true,
            stored_eta: 1.0,
            requested_eta: eta,
            passed: true,
        });
    }
    // Σ_{Q' ⊆ Q, Q' ∈ S} cells(Q') through the forest, bottom-up.
    let mut order = cubes.clone();
    order.sort_by(|a, b| b.depth().cmp(&a.depth()).then(a.cmp(b)));
    let mut inside: BTreeMap<DyadicCube, usize> = BTreeMap::new();
    for q in &order {
        let node = &s.nodes[q];
        let below: usize = node.children.iter().map(|c| inside[c]).sum();
        inside.insert(*q, below + q.cell_count(finest));
    }
    let (critical, feasible) = inside
        .iter()
        .map(|(q, tot)| (*q, q.cell_count(finest) as f64 / *tot as f64))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .unwrap();

    // Greedy fractional witness at the feasible η, finest cubes first.
    let mut free = vec![1.0f64; 1usize << (s.dim as u32 * finest)];
    let mut taken: BTreeMap<DyadicCube, f64> = BTreeMap::new();
    let mut greedy_ok = true;
    for q in &order {
        let need = feasible * q.cell_count(finest) as f64;
        let mut got = 0.0;
        for c in q.cell_range(finest) {
            if got >= need {
                break;
            }
            let t = free[c].min(need - got);
            if t > 0.0 {
                free[c] -= t;
                got += t;
            }
        }
        if got < need * (1.0 - 1e-12) {
            greedy_ok = false;
        }
        taken.insert(*q, got);
    }
    if free.iter().any(|v| *v < -1e-12) {
        greedy_ok = false;
    }

    // Stored witnesses: exact disjointness by cell marking.
    let mut owner = vec![false; free.len()];
    let mut disjoint = true;
    for q in &cubes {
        for c in s.witness_cells(q).unwrap() {
            if owner[c] {
                disjoint = false;
            }
            owner[c] = true;
        }
    }
    let stored_eta = s
        .nodes
        .values()
        .filter(|n| s.nodes.len() == 1 || n.layer > 0)
        .map(|n| n.witness_cells as f64 / n.cube.cell_count(finest) as f64)
        .fold(1.0, f64::min);
    let passed = greedy_ok && disjoint && feasible >= eta;
    Ok(SparsityReport {
        cubes: cubes.len(),
        feasible_eta: feasible,
        critical_cube: Some(critical),
        greedy_witness_ok: greedy_ok,
        stored_disjoint: disjoint,
        stored_eta,
        requested_eta: eta,
        passed,
    })
}

/// `Σ_{Q∈S} |Q| ⟨f1⟩_Q ⟨f2⟩_Q` for scalar functions.
pub fn sparse_form(s: &SparseCollection, f1: &GridFunction, f2: &GridFunction) -> Result<f64> {
    let masses = MassPair::new(f1, f2)?;
    sparse_form_prepared(s, &masses)
}

pub fn sparse_form_prepared(s: &SparseCollection, masses: &MassPair) -> Result<f64> {
    if s.dim != masses.dim() || s.finest != masses.finest() {
        return Err(Error::DimensionMismatch("collection and functions live on different grids".into()));
    }
    Ok(s.cubes().map(|q| q.measure() * masses.product(q)).sum())
}

/// `Σ_{Q∈S} |Q| · (⟨f1⟩_Q ⟨f2⟩_Q)` with convex-body averages and the Minkowski-product endpoint.
///
/// Also reports whether every product was computed exactly.
pub fn sparse_form_body(s: &SparseCollection, f1: &GridFunction, f2: &GridFunction) -> Result<(f64, bool)> {
    f1.check_compatible(f2)?;
    if s.dim != f1.dim() || s.finest != f1.finest() {
        return Err(Error::DimensionMismatch("collection and functions live on different grids".into()));
    }
    let mut total = 0.0;
    let mut exact = true;
    for q in s.cubes() {
        let k = Zonotope::body_average(f1, q)?;
        let h = Zonotope::body_average(f2, q)?;
        let p = minkowski_product(&k, &h)?;
        exact &= p.exact;
        total += q.measure() * p.value;
    }
    Ok((total, exact))
}

/// Principal cubes: the root, and every cube whose product of averages exceeds
/// `ratio` times the product at its nearest principal ancestor.
pub fn universal_collection(f1: &GridFunction, f2: &GridFunction, ratio: f64) -> Result<SparseCollection> {
    if !(ratio > 1.0) {
        return Err(Error::InvalidParameter(format!("principal ratio {ratio} must exceed 1")));
    }
    let masses = MassPair::new(f1, f2)?;
    let finest = f1.finest();
    let root = DyadicCube::root(f1.dim());
    let mut principal = vec![root];
    let mut stack: Vec<(DyadicCube, f64)> = Vec::new();
    if finest > 0 {
        for c in (0..root.num_children()).rev() {
            stack.push((root.child(c), masses.product(&root)));
        }
    }
    while let Some((q, anc)) = stack.pop() {
        let p = masses.product(&q);
        let next = if p > ratio * anc {
            principal.push(q);
            p
        } else {
            anc
        };
        if q.depth() < finest {
            for c in (0..q.num_children()).rev() {
                stack.push((q.child(c), next));
            }
        }
    }
    SparseCollection::from_cubes(f1.dim(), finest, &principal)
}

/// Random collection whose feasible `η` is at least `eta`, built bottom-up by
/// admitting a cube only while `Σ_{Q'⊆Q}|Q'| ≤ |Q|/η` still holds.
pub fn random_sparse_collection(seed: u64, dim: usize, finest: u32, eta: f64, p: f64) -> Result<SparseCollection> {
    check_grid(dim, finest)?;
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidParameter(format!("eta {eta} not in (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fan = 1usize << dim;
    // inside[depth][code]: Σ of chosen measures (in finest cells) inside the cube.
    let mut below: Vec<usize> = Vec::new();
    let mut chosen = Vec::new();
    for depth in (0..=finest).rev() {
        let count = 1usize << (dim as u32 * depth);
        let cells = 1usize << (dim as u32 * (finest - depth));
        let mut level = vec![0usize; count];
        for (code, slot) in level.iter_mut().enumerate() {
            let sub: usize = if below.is_empty() {
                0
            } else {
                below[code * fan..(code + 1) * fan].iter().sum()
            };
            *slot = sub;
            if rng.gen_bool(p) && ((sub + cells) as f64) * eta <= cells as f64 {
                *slot += cells;
                chosen.push(DyadicCube::from_morton(dim, depth, code as u64));
            }
        }
        below = level;
    }
    SparseCollection::from_cubes(dim, finest, &chosen)
}
