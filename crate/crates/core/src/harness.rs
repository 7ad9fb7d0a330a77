//! Seeded campaigns: input generators, domination verifications and the suite runner.
//!
//! Every trial derives its own seed from the campaign seed, trials run on a
//! worker pool and results are collected in trial order, so reports are
//! byte-identical across runs with the same configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convex::{
    check_vector_stopping, default_dilation, john_ellipsoid, john_sandwich, minkowski_enumerate, minkowski_product,
    vector_stopping, Zonotope,
};
use crate::czd::{cancellation_check, class_constant, cz_decompose, cz_report, mainiter_check, mainitervec_check, offdiagonal_check};
use crate::dyadic::{DyadicCube, GridFunction};
use crate::error::{Error, Result};
use crate::format::fmt_f64;
use crate::numeric::{derive_seed, log_log_slope, median};
use crate::shift::{all_subshift_norms, normalize_a2, random_shift, A2Strategy, DyadicShift, RandomShiftSpec, ShiftKernel};
use crate::sparse::{
    build_sparse_collection, build_vector_collection, sparse_form, sparse_form_body, stopping_children, verify_sparse,
    SparseCollection, DEFAULT_LAMBDA,
};
use crate::weights::{weighted_sweep, SweepConfig, SweepReport};

/// Largest number of finest cells a campaign may use.
pub const MAX_CAMPAIGN_CELLS: usize = 1 << 14;

/// Shapes of generated inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    /// Small noise plus a few single-cell spikes of mass comparable to the total.
    Spikes,
    /// Independent `±1` values with random amplitude.
    RandomSigns,
    /// Affine ramp in the first coordinate.
    Ramp,
    /// Signs alternating between the children of a random depth, plus one spike.
    Alternating,
    /// Identically zero first function (exercises the 0/0 convention).
    Zero,
}

impl InputKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            InputKind::Spikes => "spikes",
            InputKind::RandomSigns => "random-signs",
            InputKind::Ramp => "ramp",
            InputKind::Alternating => "alternating",
            InputKind::Zero => "zero",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputSpec {
    /// Kinds used in rotation, trial `t` taking `kinds[t % len]`.
    pub kinds: Vec<InputKind>,
    /// Largest number of spikes per function.
    pub max_spikes: usize,
    /// Spike mass relative to the total mass of the unit background.
    pub spike_mass: f64,
    /// Number of directions in the vector palette (`n ≥ 2`).
    pub palette: usize,
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec {
            kinds: vec![InputKind::Spikes, InputKind::RandomSigns, InputKind::Alternating, InputKind::Ramp],
            max_spikes: 4,
            spike_mass: 1.0,
            palette: 3,
        }
    }
}

fn scalar_input(kind: InputKind, spec: &InputSpec, dim: usize, finest: u32, seed: u64) -> Result<GridFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = 1usize << (dim as u32 * finest);
    let mut v: Vec<f64> = match kind {
        InputKind::Zero => vec![0.0; cells],
        InputKind::Spikes => (0..cells).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        InputKind::RandomSigns => (0..cells)
            .map(|_| rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect(),
        InputKind::Ramp => {
            let (a, b) = (rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..2.0));
            (0..cells)
                .map(|c| a + b * DyadicCube::from_morton(dim, finest, c as u64).center()[0])
                .collect()
        }
        InputKind::Alternating => {
            let depth = rng.gen_range(1..=finest.max(1)).min(finest);
            let amp = rng.gen_range(0.5..1.5);
            (0..cells)
                .map(|c| {
                    let q = DyadicCube::from_morton(dim, finest, c as u64).ancestor(depth).unwrap();
                    if q.morton().count_ones() % 2 == 0 {
                        amp
                    } else {
                        -amp
                    }
                })
                .collect()
        }
    };
    let spikes = match kind {
        InputKind::Spikes => rng.gen_range(1..=spec.max_spikes.max(1)),
        InputKind::Alternating => 1,
        _ => 0,
    };
    for _ in 0..spikes {
        let c = rng.gen_range(0..cells);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        v[c] = sign * spec.spike_mass * cells as f64 * rng.gen_range(0.25..1.0);
    }
    GridFunction::scalar(dim, finest, v)
}

fn palette(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..count.max(1))
        .map(|_| loop {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.1 {
                break v.iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// `ℝⁿ`-valued input: a scalar profile times a per-cell direction from a small palette.
///
/// At `n = 1` this is exactly the scalar input of the same seed.
pub fn vector_input(kind: InputKind, spec: &InputSpec, dim: usize, finest: u32, n: usize, seed: u64) -> Result<GridFunction> {
    let s = scalar_input(kind, spec, dim, finest, seed)?;
    if n == 1 {
        return Ok(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x9a1e));
    let dirs = palette(n, spec.palette, &mut rng);
    let mut out = Vec::with_capacity(s.num_cells() * n);
    for c in 0..s.num_cells() {
        let d = &dirs[rng.gen_range(0..dirs.len())];
        out.extend(d.iter().map(|x| x * s.value(c)[0]));
    }
    GridFunction::new(dim, finest, n, out)
}

/// The input pair of trial `trial`; both functions share the kind.
pub fn input_pair(spec: &InputSpec, dim: usize, finest: u32, n: usize, seed: u64, trial: usize) -> Result<(GridFunction, GridFunction, InputKind)> {
    if spec.kinds.is_empty() {
        return Err(Error::InvalidParameter("no input kinds configured".into()));
    }
    let kind = spec.kinds[trial % spec.kinds.len()];
    let f1 = vector_input(kind, spec, dim, finest, n, derive_seed(seed, 1))?;
    let second = if kind == InputKind::Zero { InputKind::RandomSigns } else { kind };
    let f2 = vector_input(second, spec, dim, finest, n, derive_seed(seed, 2))?;
    Ok((f1, f2, kind))
}

/// Domination campaign parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub dim: usize,
    pub finest: u32,
    pub n: usize,
    pub rho_min: u32,
    pub rho_max: u32,
    pub trials: usize,
    pub seed: u64,
    pub shifts_per_rho: usize,
    pub density: f64,
    /// `None` alternates cancellative and general shifts.
    pub cancellative: Option<bool>,
    /// `None` lets the generator choose the certificate.
    pub strategy: Option<A2Strategy>,
    pub inputs: InputSpec,
    /// Scalar stopping threshold `λ`.
    pub lambda: f64,
    /// `None` uses the proof constant for the configured dimensions.
    pub envelope: Option<f64>,
    /// Largest admissible fitted exponent of `ρ` in the undivided ratio; `None` records it unchecked.
    pub slope_envelope: Option<f64>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            dim: 1,
            finest: 10,
            n: 1,
            rho_min: 1,
            rho_max: 6,
            trials: 500,
            seed: 0,
            shifts_per_rho: 1,
            density: 0.3,
            cancellative: None,
            strategy: None,
            inputs: InputSpec::default(),
            lambda: DEFAULT_LAMBDA,
            envelope: None,
            slope_envelope: Some(1.1),
        }
    }
}

impl CampaignConfig {
    /// The scalar protocol at `n = 2`.
    pub fn vector_default() -> Self {
        CampaignConfig {
            n: 2,
            ..CampaignConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::dyadic::check_grid(self.dim, self.finest)?;
        let cells = 1usize << (self.dim as u32 * self.finest);
        if cells > MAX_CAMPAIGN_CELLS {
            return Err(Error::SizeOverflow {
                size: cells,
                limit: MAX_CAMPAIGN_CELLS,
            });
        }
        if self.n == 0 || self.n > crate::convex::MAX_BODY_DIM {
            return Err(Error::InvalidParameter(format!("n = {} outside 1..=3", self.n)));
        }
        if self.rho_min == 0 || self.rho_min > self.rho_max || self.rho_max > self.finest || self.dim as u32 * 2 * self.rho_max > 16 {
            return Err(Error::InvalidParameter(format!(
                "complexity range {}..={} is not admissible for d = {}, L = {}",
                self.rho_min, self.rho_max, self.dim, self.finest
            )));
        }
        if !(self.lambda > 1.0) || !(0.0..=1.0).contains(&self.density) || self.trials > 100_000 || self.shifts_per_rho > 1000 {
            return Err(Error::InvalidParameter("threshold, density or trial counts out of range".into()));
        }
        Ok(())
    }

    /// Proof constant: per-class bound plus the off-diagonal term `2^{2d+1}`.
    pub fn derived_envelope(&self) -> f64 {
        let off = (1u64 << (2 * self.dim + 1)) as f64;
        if self.n == 1 {
            class_constant(self.dim, self.lambda, 1.0) + off
        } else {
            let n = self.n as f64;
            let d = (1u64 << self.dim) as f64;
            n * n * n * default_dilation(self.n) * (d + 4.0 * d + 4.0) + off * n
        }
    }

    pub fn envelope(&self) -> f64 {
        self.envelope.unwrap_or_else(|| self.derived_envelope())
    }
}

/// One (trial, ρ, shift) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    pub input: InputKind,
    pub rho: u32,
    pub shift: usize,
    pub form: f64,
    pub sparse_form: f64,
    /// `|form| / (ρ sparse_form)`.
    pub ratio: f64,
    /// `|form| / sparse_form`.
    pub undivided: f64,
    pub certificate: f64,
    pub collection: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoSummary {
    pub rho: u32,
    pub count: usize,
    pub max_ratio: f64,
    pub median_ratio: f64,
    pub max_undivided: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breach {
    pub trial: usize,
    pub seed: u64,
    pub rho: u32,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominationReport {
    pub n: usize,
    pub trials: usize,
    /// Trials with a vanishing sparse form (0/0), excluded from the statistics.
    pub discarded: usize,
    pub rows: Vec<TrialRow>,
    pub per_rho: Vec<RhoSummary>,
    pub max_ratio: f64,
    pub median_ratio: f64,
    pub envelope: f64,
    /// Fitted exponent of `ρ` in the per-`ρ` maximum of the undivided ratio.
    pub rho_exponent: Option<f64>,
    pub slope_envelope: Option<f64>,
    /// Collection cubes whose body average is not full-dimensional.
    pub degenerate_bodies: usize,
    /// Body products decided without exhaustive geometry.
    pub inexact_products: usize,
    /// Rebuilding every collection after the shifts ran gave the same collection.
    pub shift_independent: bool,
    pub breaches: Vec<Breach>,
    pub passed: bool,
}

impl DominationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,seed,input,rho,shift,form,sparse_form,ratio,undivided,certificate,collection\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.trial,
                r.seed,
                r.input.as_str(),
                r.rho,
                r.shift,
                fmt_f64(r.form),
                fmt_f64(r.sparse_form),
                fmt_f64(r.ratio),
                fmt_f64(r.undivided),
                fmt_f64(r.certificate),
                r.collection
            );
        }
        out
    }
}

struct TrialOutcome {
    rows: Vec<TrialRow>,
    discarded: bool,
    degenerate: usize,
    inexact: usize,
    stable: bool,
}

fn collection_for(cfg: &CampaignConfig, bodies: bool, f1: &GridFunction, f2: &GridFunction) -> Result<(SparseCollection, bool)> {
    if !bodies {
        Ok((build_sparse_collection(f1, f2, cfg.lambda)?, true))
    } else {
        build_vector_collection(f1, f2, default_dilation(cfg.n))
    }
}

fn run_trial(cfg: &CampaignConfig, trial: usize, bodies: bool) -> Result<TrialOutcome> {
    let seed = derive_seed(cfg.seed, trial as u64);
    let (f1, f2, kind) = input_pair(&cfg.inputs, cfg.dim, cfg.finest, cfg.n, seed, trial)?;
    let (collection, exact_stop) = collection_for(cfg, bodies, &f1, &f2)?;
    let mut degenerate = 0;
    let mut inexact = usize::from(!exact_stop);
    let lambda_s = if !bodies {
        sparse_form(&collection, &f1, &f2)?
    } else {
        for q in collection.cubes() {
            for f in [&f1, &f2] {
                let k = Zonotope::body_average(f, q)?;
                if !k.is_empty() && !k.is_full_dimensional() {
                    degenerate += 1;
                }
            }
        }
        let (v, exact) = sparse_form_body(&collection, &f1, &f2)?;
        inexact += usize::from(!exact);
        v
    };
    if lambda_s == 0.0 {
        return Ok(TrialOutcome {
            rows: Vec::new(),
            discarded: true,
            degenerate,
            inexact,
            stable: true,
        });
    }
    let mut rows = Vec::new();
    for rho in cfg.rho_min..=cfg.rho_max {
        for s in 0..cfg.shifts_per_rho {
            let mut spec = RandomShiftSpec::new(cfg.dim, cfg.finest, rho, cfg.density);
            spec.cancellative = cfg.cancellative.unwrap_or((trial + s + rho as usize) % 2 == 0);
            spec.strategy = cfg.strategy;
            let shift = random_shift(derive_seed(seed, 1000 + 64 * rho as u64 + s as u64), &spec)?;
            let form = shift.form(&f1, &f2, crate::shift::Selection::All)?;
            let undivided = form.abs() / lambda_s;
            rows.push(TrialRow {
                trial,
                seed,
                input: kind,
                rho,
                shift: s,
                form,
                sparse_form: lambda_s,
                ratio: undivided / rho as f64,
                undivided,
                certificate: shift.certificate().bound,
                collection: collection.len(),
            });
        }
    }
    let stable = collection_for(cfg, bodies, &f1, &f2)?.0 == collection;
    Ok(TrialOutcome {
        rows,
        discarded: false,
        degenerate,
        inexact,
        stable,
    })
}

fn domination(cfg: &CampaignConfig, bodies: bool) -> Result<DominationReport> {
    cfg.validate()?;
    let outcomes: Vec<TrialOutcome> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, t, bodies))
        .collect::<Result<_>>()?;
    let envelope = cfg.envelope();
    let mut rows = Vec::new();
    let mut discarded = 0;
    let mut degenerate_bodies = 0;
    let mut inexact_products = 0;
    let mut shift_independent = true;
    for o in outcomes {
        discarded += usize::from(o.discarded);
        degenerate_bodies += o.degenerate;
        inexact_products += o.inexact;
        shift_independent &= o.stable;
        rows.extend(o.rows);
    }
    rows.sort_by(|a, b| (a.trial, a.rho, a.shift).cmp(&(b.trial, b.rho, b.shift)));
    let mut per_rho = Vec::new();
    for rho in cfg.rho_min..=cfg.rho_max {
        let ratios: Vec<f64> = rows.iter().filter(|r| r.rho == rho).map(|r| r.ratio).collect();
        let und = rows.iter().filter(|r| r.rho == rho).map(|r| r.undivided).fold(0.0f64, f64::max);
        per_rho.push(RhoSummary {
            rho,
            count: ratios.len(),
            max_ratio: ratios.iter().copied().fold(0.0f64, f64::max),
            median_ratio: if ratios.is_empty() { 0.0 } else { median(&ratios) },
            max_undivided: und,
        });
    }
    let all: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let max_ratio = all.iter().copied().fold(0.0f64, f64::max);
    let median_ratio = if all.is_empty() { 0.0 } else { median(&all) };
    let fit: Vec<&RhoSummary> = per_rho.iter().filter(|p| p.max_undivided > 0.0).collect();
    let rho_exponent = if fit.len() >= 2 {
        let xs: Vec<f64> = fit.iter().map(|p| p.rho as f64).collect();
        let ys: Vec<f64> = fit.iter().map(|p| p.max_undivided).collect();
        log_log_slope(&xs, &ys).map(|f| f.slope)
    } else {
        None
    };
    let breaches: Vec<Breach> = rows
        .iter()
        .filter(|r| !(r.ratio <= envelope))
        .map(|r| Breach {
            trial: r.trial,
            seed: r.seed,
            rho: r.rho,
            ratio: r.ratio,
        })
        .collect();
    let passed = breaches.is_empty()
        && shift_independent
        && match (rho_exponent, cfg.slope_envelope) {
            (Some(s), Some(e)) => s <= e,
            _ => true,
        };
    Ok(DominationReport {
        n: cfg.n,
        trials: cfg.trials,
        discarded,
        rows,
        per_rho,
        max_ratio,
        median_ratio,
        envelope,
        rho_exponent,
        slope_envelope: cfg.slope_envelope,
        degenerate_bodies,
        inexact_products,
        shift_independent,
        breaches,
        passed,
    })
}

/// Scalar domination campaign.
pub fn verify_scalar_domination(cfg: &CampaignConfig) -> Result<DominationReport> {
    if cfg.n != 1 {
        return Err(Error::InvalidParameter("scalar campaigns need n = 1".into()));
    }
    domination(cfg, false)
}

/// Vector domination campaign with body sparse forms and the vector stopping rule.
///
/// With `n = 1` the inputs and shifts coincide with the scalar campaign, while the
/// collection and sparse form still go through the body code path.
pub fn verify_vector_domination(cfg: &CampaignConfig) -> Result<DominationReport> {
    domination(cfg, true)
}

/// The sub-suites of [`run_all`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Sparse,
    Czd,
    Convex,
    Shift,
    Weights,
    Scalar,
    Vector,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Sparse,
        Suite::Czd,
        Suite::Convex,
        Suite::Shift,
        Suite::Weights,
        Suite::Scalar,
        Suite::Vector,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Suite::Sparse => "sparse",
            Suite::Czd => "czd",
            Suite::Convex => "convex",
            Suite::Shift => "shift",
            Suite::Weights => "weights",
            Suite::Scalar => "scalar",
            Suite::Vector => "vector",
        }
    }

    pub fn parse(s: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

/// Packing campaign on scalar stopping collections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparseSuiteConfig {
    /// `(d, L, trials)` triples.
    pub grids: Vec<(usize, u32, usize)>,
    pub seed: u64,
    pub lambda: f64,
    pub inputs: InputSpec,
}

impl Default for SparseSuiteConfig {
    fn default() -> Self {
        SparseSuiteConfig {
            grids: vec![(1, 10, 500), (2, 5, 500)],
            seed: 0,
            lambda: DEFAULT_LAMBDA,
            inputs: InputSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSuiteReport {
    pub pairs: usize,
    pub nodes: usize,
    /// `max Σ_{I ∈ ℐ_Q}|I| / |Q|` over non-root nodes.
    pub max_packing: f64,
    /// Nodes with `2^7 Σ|I| > |Q|` (integer cell counts).
    pub violations: usize,
    pub min_feasible_eta: f64,
    pub passed: bool,
}

pub fn sparse_suite(cfg: &SparseSuiteConfig) -> Result<SparseSuiteReport> {
    let jobs: Vec<(usize, u32, usize, u64)> = cfg
        .grids
        .iter()
        .enumerate()
        .flat_map(|(g, &(d, l, t))| (0..t).map(move |i| (d, l, i, derive_seed(derive_seed(cfg.seed, g as u64), i as u64))))
        .collect();
    let bound_shift = 7u32;
    let results: Vec<(usize, f64, usize, f64)> = jobs
        .par_iter()
        .map(|&(d, l, i, seed)| {
            let (f1, f2, _) = input_pair(&cfg.inputs, d, l, 1, seed, i)?;
            let s = build_sparse_collection(&f1, &f2, cfg.lambda)?;
            let mut worst = 0.0f64;
            let mut bad = 0;
            let mut nodes = 0;
            for node in s.nodes().filter(|n| n.layer > 0) {
                let total = node.cube.cell_count(l);
                let covered = total - node.witness_cells;
                nodes += 1;
                if (covered << bound_shift) > total {
                    bad += 1;
                }
                worst = worst.max(covered as f64 / total as f64);
            }
            let eta = verify_sparse(&s, 0.5)?.feasible_eta;
            Ok((nodes, worst, bad, eta))
        })
        .collect::<Result<_>>()?;
    let nodes = results.iter().map(|r| r.0).sum();
    let max_packing = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let violations = results.iter().map(|r| r.2).sum();
    let min_feasible_eta = results.iter().map(|r| r.3).fold(1.0, f64::min);
    Ok(SparseSuiteReport {
        pairs: jobs.len(),
        nodes,
        max_packing,
        violations,
        min_feasible_eta,
        passed: violations == 0,
    })
}

/// Calderón–Zygmund campaign: constants, cancellation and main-iteration checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CzdSuiteConfig {
    pub dim: usize,
    pub finest: u32,
    pub trials: usize,
    pub shifts: usize,
    pub rho_max: u32,
    pub vector_trials: usize,
    pub seed: u64,
    pub inputs: InputSpec,
}

impl Default for CzdSuiteConfig {
    fn default() -> Self {
        CzdSuiteConfig {
            dim: 1,
            finest: 10,
            trials: 500,
            shifts: 200,
            rho_max: 6,
            vector_trials: 20,
            seed: 0,
            inputs: InputSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CzdSuiteReport {
    pub decompositions: usize,
    pub cz_failures: usize,
    pub max_linf_ratio: f64,
    pub max_bad_ratio: f64,
    pub max_reconstruction: f64,
    pub max_mean_zero: f64,
    pub shifts: usize,
    pub cancellation_pairs: usize,
    pub max_cancellation: f64,
    pub mainiter_failures: usize,
    pub max_residual_fraction: f64,
    pub offdiagonal_failures: usize,
    pub vector_checks: usize,
    pub vector_failures: usize,
    pub passed: bool,
}

fn random_base(rng: &mut ChaCha8Rng, dim: usize, finest: u32) -> DyadicCube {
    let depth = rng.gen_range(0..=finest.saturating_sub(9).min(2));
    DyadicCube::from_morton(dim, depth, rng.gen_range(0..1u64 << (dim as u32 * depth)))
}

pub fn czd_suite(cfg: &CzdSuiteConfig) -> Result<CzdSuiteReport> {
    let lambda = DEFAULT_LAMBDA;
    let cz: Vec<Vec<crate::czd::CzReport>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let seed = derive_seed(cfg.seed, t as u64);
            let (f1, f2, _) = input_pair(&cfg.inputs, cfg.dim, cfg.finest, 1, seed, t)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
            let q = random_base(&mut rng, cfg.dim, cfg.finest);
            let st = stopping_children(&f1, &f2, &q, lambda)?;
            [&f1, &f2]
                .iter()
                .map(|f| cz_report(f, &cz_decompose(f, &q, &st)?, lambda))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let cz: Vec<crate::czd::CzReport> = cz.into_iter().flatten().collect();

    struct ShiftOutcome {
        pairs: usize,
        cancel: f64,
        main_ok: bool,
        fraction: f64,
        off_ok: bool,
    }
    let rho_max = cfg.rho_max.min(cfg.finest).min(16 / (2 * cfg.dim as u32)).max(1);
    let shifts: Vec<ShiftOutcome> = (0..cfg.shifts)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(derive_seed(cfg.seed, 0xc2d), i as u64);
            let (f1, f2, _) = input_pair(&cfg.inputs, cfg.dim, cfg.finest, 1, seed, i)?;
            let mut spec = RandomShiftSpec::new(cfg.dim, cfg.finest, 1 + (i as u32 % rho_max), 0.3);
            spec.cancellative = i % 2 == 0;
            let shift = random_shift(derive_seed(seed, 7), &spec)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
            let q = random_base(&mut rng, cfg.dim, cfg.finest);
            let st = stopping_children(&f1, &f2, &q, lambda)?;
            let d1 = cz_decompose(&f1, &q, &st)?;
            let d2 = cz_decompose(&f2, &q, &st)?;
            let a = cancellation_check(&shift, &d1.good, &d2, true)?;
            let b = cancellation_check(&shift, &d2.good, &d1, false)?;
            let m = mainiter_check(&shift, &f1, &f2, &q)?;
            let off = offdiagonal_check(&shift, &f1, &f2)?;
            Ok(ShiftOutcome {
                pairs: a.pairs + b.pairs,
                cancel: a.max_rel.max(b.max_rel),
                main_ok: m.passed,
                fraction: m.residual / m.envelope,
                off_ok: off.passed,
            })
        })
        .collect::<Result<_>>()?;

    let vec_ok: Vec<bool> = (0..cfg.vector_trials)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(derive_seed(cfg.seed, 0x7ec), i as u64);
            let n = 2 + i % 2;
            let (f1, f2, _) = input_pair(&cfg.inputs, 1, 12, n, seed, i)?;
            let mut spec = RandomShiftSpec::new(1, 12, 1 + (i as u32 % 3), 0.3);
            spec.cancellative = i % 2 == 1;
            let shift = random_shift(derive_seed(seed, 7), &spec)?;
            Ok(mainitervec_check(&shift, &f1, &f2, &DyadicCube::root(1))?.passed)
        })
        .collect::<Result<_>>()?;

    let cz_failures = cz.iter().filter(|r| !r.passed).count();
    let max_cancellation = shifts.iter().map(|s| s.cancel).fold(0.0, f64::max);
    let mainiter_failures = shifts.iter().filter(|s| !s.main_ok).count();
    let offdiagonal_failures = shifts.iter().filter(|s| !s.off_ok).count();
    let vector_failures = vec_ok.iter().filter(|v| !**v).count();
    Ok(CzdSuiteReport {
        decompositions: cz.len(),
        cz_failures,
        max_linf_ratio: cz.iter().map(|r| if r.linf_bound > 0.0 { r.linf / r.linf_bound } else { 0.0 }).fold(0.0, f64::max),
        max_bad_ratio: cz.iter().map(|r| r.bad_ratio).fold(0.0, f64::max),
        max_reconstruction: cz.iter().map(|r| r.reconstruction_error).fold(0.0, f64::max),
        max_mean_zero: cz.iter().map(|r| r.mean_zero_error).fold(0.0, f64::max),
        shifts: shifts.len(),
        cancellation_pairs: shifts.iter().map(|s| s.pairs).sum(),
        max_cancellation,
        mainiter_failures,
        max_residual_fraction: shifts.iter().map(|s| s.fraction).fold(0.0, f64::max),
        offdiagonal_failures,
        vector_checks: vec_ok.len(),
        vector_failures,
        passed: cz_failures == 0
            && max_cancellation <= 1e-12
            && mainiter_failures == 0
            && offdiagonal_failures == 0
            && vector_failures == 0,
    })
}

/// Convex-geometry oracles: vector stopping, John sandwich and Minkowski products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvexSuiteConfig {
    pub stopping_trials: usize,
    pub stopping_finest: u32,
    pub john_bodies: usize,
    pub product_instances: usize,
    pub max_generators: usize,
    pub seed: u64,
    pub inputs: InputSpec,
}

impl Default for ConvexSuiteConfig {
    fn default() -> Self {
        ConvexSuiteConfig {
            stopping_trials: 200,
            stopping_finest: 12,
            john_bodies: 1000,
            product_instances: 1000,
            max_generators: 12,
            seed: 0,
            inputs: InputSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexSuiteReport {
    pub stopping_checks: usize,
    pub stopping_cubes: usize,
    pub max_containment_ratio: f64,
    pub max_packing_fraction: f64,
    pub packing_failures: usize,
    pub stopping_inexact: usize,
    pub john_bodies: usize,
    pub campaign_bodies: usize,
    pub john_failures: usize,
    pub john_inexact: usize,
    /// `max(inner − 1, outer − 1)` over the sandwich margins.
    pub worst_sandwich: f64,
    pub product_instances: usize,
    pub product_max_error: f64,
    pub passed: bool,
}

fn random_zonotope(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Result<Zonotope> {
    let gens: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-1.0..1.0) * rng.gen_range(0.1..3.0)).collect();
    Zonotope::new(n, &gens)
}

pub fn convex_suite(cfg: &ConvexSuiteConfig) -> Result<ConvexSuiteReport> {
    struct StopOutcome {
        cubes: usize,
        ratio: f64,
        packing: f64,
        packing_ok: bool,
        exact: bool,
        body: Zonotope,
    }
    let stops: Vec<StopOutcome> = (0..2 * cfg.stopping_trials)
        .into_par_iter()
        .map(|i| {
            let n = 2 + i % 2;
            let seed = derive_seed(derive_seed(cfg.seed, 0x5709), i as u64);
            let kind = cfg.inputs.kinds[(i / 2) % cfg.inputs.kinds.len().max(1)];
            let f = vector_input(kind, &cfg.inputs, 1, cfg.stopping_finest, n, seed)?;
            let q = DyadicCube::root(1);
            let a = default_dilation(n);
            let st = vector_stopping(&f, &q, a)?;
            let r = check_vector_stopping(&f, &q, a, &st.cubes)?;
            Ok(StopOutcome {
                cubes: st.cubes.len(),
                ratio: r.containment_ratio,
                packing: r.packing / r.packing_bound,
                packing_ok: r.packing_ok,
                exact: st.exact && r.containment_exact,
                body: Zonotope::body_average(&f, &q)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut bodies: Vec<Zonotope> = Vec::with_capacity(cfg.john_bodies + stops.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x70b));
    for i in 0..cfg.john_bodies {
        let n = 2 + i % 2;
        let p = rng.gen_range(n..=cfg.max_generators.max(n));
        bodies.push(random_zonotope(&mut rng, n, p)?);
    }
    let campaign_bodies = stops.iter().filter(|s| s.body.is_full_dimensional()).count();
    bodies.extend(stops.iter().filter(|s| s.body.is_full_dimensional()).map(|s| s.body.clone()));
    let sandwiches: Vec<(bool, bool, f64)> = bodies
        .par_iter()
        .map(|k| {
            let e = john_ellipsoid(k)?;
            let s = john_sandwich(k, &e)?;
            Ok((s.holds(1e-6), s.exact, (s.inner - 1.0).max(s.outer - 1.0)))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x3ab));
    let pairs: Vec<(Zonotope, Zonotope)> = (0..cfg.product_instances)
        .map(|i| {
            let n = 2 + i % 2;
            let p = rng.gen_range(1..=cfg.max_generators);
            let q = rng.gen_range(1..=cfg.max_generators);
            Ok((random_zonotope(&mut rng, n, p)?, random_zonotope(&mut rng, n, q)?))
        })
        .collect::<Result<_>>()?;
    let errors: Vec<f64> = pairs
        .par_iter()
        .map(|(k, h)| {
            let a = minkowski_product(k, h)?;
            let b = minkowski_enumerate(k, h)?;
            Ok(if a.exact { (a.value - b.value).abs() / (1.0 + b.value) } else { f64::INFINITY })
        })
        .collect::<Result<_>>()?;

    let max_containment_ratio = stops.iter().map(|s| s.ratio).fold(0.0, f64::max);
    let packing_failures = stops.iter().filter(|s| !s.packing_ok).count();
    let john_failures = sandwiches.iter().filter(|s| !s.0).count();
    let product_max_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(ConvexSuiteReport {
        stopping_checks: stops.len(),
        stopping_cubes: stops.iter().map(|s| s.cubes).sum(),
        max_containment_ratio,
        max_packing_fraction: stops.iter().map(|s| s.packing).fold(0.0, f64::max),
        packing_failures,
        stopping_inexact: stops.iter().filter(|s| !s.exact).count(),
        john_bodies: bodies.len(),
        campaign_bodies,
        john_failures,
        john_inexact: sandwiches.iter().filter(|s| !s.1).count(),
        worst_sandwich: sandwiches.iter().map(|s| s.2).fold(f64::NEG_INFINITY, f64::max),
        product_instances: errors.len(),
        product_max_error,
        passed: max_containment_ratio <= 1.0 + 1e-9 && packing_failures == 0 && john_failures == 0 && product_max_error <= 1e-9,
    })
}

/// A2 certificates on small shifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSuiteConfig {
    pub shifts: usize,
    pub max_kernels: usize,
    pub finest: u32,
    pub seed: u64,
}

impl Default for ShiftSuiteConfig {
    fn default() -> Self {
        ShiftSuiteConfig {
            shifts: 200,
            max_kernels: 8,
            finest: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSuiteReport {
    pub shifts: usize,
    pub subcollections: usize,
    /// Largest subshift norm after exact normalization.
    pub max_normalized_norm: f64,
    /// Smallest `scale-count bound / exact bound` on the raw shifts.
    pub min_certificate_ratio: f64,
    pub passed: bool,
}

/// A shift on at most `max_kernels` random cubes with random blocks.
pub fn small_random_shift(seed: u64, dim: usize, finest: u32, max_kernels: usize) -> Result<DyadicShift> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m1 = rng.gen_range(0..=2.min(finest));
    let m2 = rng.gen_range(0..=2.min(finest));
    let top = finest - m1.max(m2);
    let mut cubes = std::collections::BTreeSet::new();
    let count = rng.gen_range(1..=max_kernels.max(1));
    for _ in 0..count * 4 {
        if cubes.len() == count {
            break;
        }
        let depth = rng.gen_range(0..=top);
        cubes.insert(DyadicCube::from_morton(dim, depth, rng.gen_range(0..1u64 << (dim as u32 * depth))));
    }
    let kernels = cubes
        .into_iter()
        .map(|q| {
            let b = 1.0 / q.measure();
            let len = 1usize << (dim as u32 * (m1 + m2));
            ShiftKernel::new(q, m1, m2, (0..len).map(|_| rng.gen_range(-b..=b)).collect())
        })
        .collect::<Result<_>>()?;
    DyadicShift::new(dim, finest, m1, m2, kernels)
}

pub fn shift_suite(cfg: &ShiftSuiteConfig) -> Result<ShiftSuiteReport> {
    let out: Vec<(usize, f64, f64)> = (0..cfg.shifts)
        .into_par_iter()
        .map(|i| {
            let dim = 1 + i % 2;
            let finest = if dim == 1 { cfg.finest } else { cfg.finest.min(3) };
            let raw = small_random_shift(derive_seed(cfg.seed, i as u64), dim, finest, cfg.max_kernels)?;
            let exact = normalize_a2(&raw, A2Strategy::ExactSmall, cfg.max_kernels)?;
            let count = normalize_a2(&raw, A2Strategy::ScaleCount, cfg.max_kernels)?;
            let norms = all_subshift_norms(&exact, cfg.max_kernels)?;
            let max = norms.iter().map(|n| n.1).fold(0.0, f64::max);
            let e = exact.certificate().bound * exact.certificate().factor;
            let c = count.certificate().bound * count.certificate().factor;
            Ok((norms.len(), max, if e > 0.0 { c / e } else { f64::INFINITY }))
        })
        .collect::<Result<_>>()?;
    let max_normalized_norm = out.iter().map(|o| o.1).fold(0.0, f64::max);
    let min_certificate_ratio = out.iter().map(|o| o.2).fold(f64::INFINITY, f64::min);
    Ok(ShiftSuiteReport {
        shifts: out.len(),
        subcollections: out.iter().map(|o| o.0).sum(),
        max_normalized_norm,
        min_certificate_ratio,
        passed: max_normalized_norm <= 1.0 + 1e-9 && min_certificate_ratio >= 1.0 - 1e-12,
    })
}

/// Configuration of [`run_all`]; the file form of `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sparse: SparseSuiteConfig,
    pub czd: CzdSuiteConfig,
    pub convex: ConvexSuiteConfig,
    pub shift: ShiftSuiteConfig,
    pub weights: SweepConfig,
    pub scalar: CampaignConfig,
    pub vector: VectorCampaigns,
}

/// Vector campaigns: the `n ≥ 2` run and the `n = 1` reproduction of the scalar run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VectorCampaigns {
    pub campaign: CampaignConfig,
    /// Also rerun the scalar campaign through the vector path at `n = 1`.
    pub reproduce_scalar: bool,
}

impl Default for VectorCampaigns {
    fn default() -> Self {
        VectorCampaigns {
            campaign: CampaignConfig::vector_default(),
            reproduce_scalar: true,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    /// Replaces every seed by streams derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sparse.seed = derive_seed(seed, 1);
        self.czd.seed = derive_seed(seed, 2);
        self.convex.seed = derive_seed(seed, 3);
        self.shift.seed = derive_seed(seed, 4);
        self.weights.shift_seed = derive_seed(seed, 5);
        self.weights.weight_seed = derive_seed(seed, 6);
        self.scalar.seed = derive_seed(seed, 7);
        self.vector.campaign.seed = derive_seed(seed, 8);
        self
    }

    /// Smaller sizes for quick runs.
    pub fn quick() -> Self {
        let mut c = RunConfig::default();
        c.sparse.grids = vec![(1, 10, 40), (2, 5, 40)];
        c.czd.trials = 40;
        c.czd.shifts = 20;
        c.czd.vector_trials = 4;
        c.convex.stopping_trials = 20;
        c.convex.john_bodies = 100;
        c.convex.product_instances = 100;
        c.shift.shifts = 20;
        c.weights.params = crate::weights::grid_spec(0.0, 0.9, 4);
        c.weights.finest = 8;
        c.weights.shifts = 4;
        c.scalar.trials = 24;
        c.vector.campaign.trials = 12;
        c
    }
}

/// Outcome of one suite: verdict, headline metrics and report files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub suite: Suite,
    pub passed: bool,
    pub metrics: BTreeMap<String, f64>,
    /// File name → contents.
    pub files: BTreeMap<String, String>,
}

fn metrics<T: Serialize>(report: &T) -> BTreeMap<String, f64> {
    let v = serde_json::to_value(report).expect("reports serialize");
    let mut out = BTreeMap::new();
    if let serde_json::Value::Object(map) = v {
        for (k, v) in map {
            match v {
                serde_json::Value::Number(x) => {
                    out.insert(k, x.as_f64().unwrap_or(f64::NAN));
                }
                serde_json::Value::Bool(b) => {
                    out.insert(k, if b { 1.0 } else { 0.0 });
                }
                _ => {}
            }
        }
    }
    out
}

/// Pretty JSON with a trailing newline, as written to report files.
pub fn report_json<T: Serialize>(report: &T) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("reports serialize");
    s.push('\n');
    s
}

fn outcome<T: Serialize>(suite: Suite, passed: bool, report: &T, extra: Vec<(String, String)>) -> SuiteOutcome {
    let mut files = BTreeMap::new();
    files.insert(format!("{}.json", suite.as_str()), report_json(report));
    files.extend(extra);
    SuiteOutcome {
        suite,
        passed,
        metrics: metrics(report),
        files,
    }
}

fn per_rho_csv(r: &DominationReport) -> String {
    let mut out = String::from("rho,count,max_ratio,median_ratio,max_undivided\n");
    for p in &r.per_rho {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.rho,
            p.count,
            fmt_f64(p.max_ratio),
            fmt_f64(p.median_ratio),
            fmt_f64(p.max_undivided)
        );
    }
    out
}

fn domination_outcome(suite: Suite, r: &DominationReport, extra: Vec<(String, String)>) -> SuiteOutcome {
    #[derive(Serialize)]
    struct Summary<'a> {
        n: usize,
        trials: usize,
        discarded: usize,
        max_ratio: f64,
        median_ratio: f64,
        envelope: f64,
        rho_exponent: Option<f64>,
        slope_envelope: Option<f64>,
        degenerate_bodies: usize,
        inexact_products: usize,
        shift_independent: bool,
        breaches: &'a [Breach],
        passed: bool,
    }
    let s = Summary {
        n: r.n,
        trials: r.trials,
        discarded: r.discarded,
        max_ratio: r.max_ratio,
        median_ratio: r.median_ratio,
        envelope: r.envelope,
        rho_exponent: r.rho_exponent,
        slope_envelope: r.slope_envelope,
        degenerate_bodies: r.degenerate_bodies,
        inexact_products: r.inexact_products,
        shift_independent: r.shift_independent,
        breaches: &r.breaches,
        passed: r.passed,
    };
    let name = suite.as_str();
    let mut files = vec![
        (format!("{name}_trials.csv"), r.to_csv()),
        (format!("{name}_rho.csv"), per_rho_csv(r)),
    ];
    files.extend(extra);
    let mut o = outcome(suite, r.passed, &s, files);
    if let Some(e) = r.rho_exponent {
        o.metrics.insert("rho_exponent".into(), e);
    }
    o
}

/// Largest relative difference between two campaigns' ratios, trial by trial.
pub fn compare_campaigns(a: &DominationReport, b: &DominationReport) -> Option<f64> {
    if a.rows.len() != b.rows.len() || a.discarded != b.discarded {
        return None;
    }
    let mut worst = 0.0f64;
    for (x, y) in a.rows.iter().zip(&b.rows) {
        if (x.trial, x.rho, x.shift, x.seed) != (y.trial, y.rho, y.shift, y.seed) || x.collection != y.collection {
            return None;
        }
        let scale = x.ratio.abs().max(y.ratio.abs());
        if scale > 0.0 {
            worst = worst.max((x.ratio - y.ratio).abs() / scale);
        }
    }
    Some(worst)
}

/// Tolerance of the trial-for-trial comparison between the scalar campaign and its `n = 1` vector rerun.
pub const REPRODUCTION_TOL: f64 = 1e-12;

pub fn run_suite(suite: Suite, cfg: &RunConfig) -> Result<SuiteOutcome> {
    Ok(match suite {
        Suite::Sparse => {
            let r = sparse_suite(&cfg.sparse)?;
            outcome(suite, r.passed, &r, Vec::new())
        }
        Suite::Czd => {
            let r = czd_suite(&cfg.czd)?;
            outcome(suite, r.passed, &r, Vec::new())
        }
        Suite::Convex => {
            let r = convex_suite(&cfg.convex)?;
            outcome(suite, r.passed, &r, Vec::new())
        }
        Suite::Shift => {
            let r = shift_suite(&cfg.shift)?;
            outcome(suite, r.passed, &r, Vec::new())
        }
        Suite::Weights => {
            let r: SweepReport = weighted_sweep(&cfg.weights)?;
            let mut o = outcome(suite, r.passed, &summary_of_sweep(&r), vec![("weights_sweep.csv".into(), r.to_csv())]);
            if let Some(s) = r.slope {
                o.metrics.insert("slope".into(), s);
            }
            o
        }
        Suite::Scalar => {
            let r = verify_scalar_domination(&cfg.scalar)?;
            domination_outcome(suite, &r, Vec::new())
        }
        Suite::Vector => {
            let r = verify_vector_domination(&cfg.vector.campaign)?;
            let mut extra = Vec::new();
            let mut repro = None;
            if cfg.vector.reproduce_scalar {
                let mut one = cfg.scalar.clone();
                one.n = 1;
                let scalar = verify_scalar_domination(&one)?;
                let vec1 = verify_vector_domination(&one)?;
                repro = Some(compare_campaigns(&scalar, &vec1).unwrap_or(f64::INFINITY));
                extra.push(("vector_n1_trials.csv".into(), vec1.to_csv()));
            }
            let mut o = domination_outcome(suite, &r, extra);
            if let Some(e) = repro {
                o.metrics.insert("n1_reproduction_error".into(), e);
                o.passed &= e <= REPRODUCTION_TOL;
            }
            o
        }
    })
}

#[derive(Serialize)]
struct SweepSummary {
    family: String,
    points: usize,
    slope: Option<f64>,
    max_ratio: f64,
    constant_weight_error: f64,
    characteristic_decades: f64,
    passed: bool,
}

fn summary_of_sweep(r: &SweepReport) -> SweepSummary {
    SweepSummary {
        family: r.config.family.as_str().into(),
        points: r.points.len(),
        slope: r.slope,
        max_ratio: r.max_ratio,
        constant_weight_error: r.constant_weight_error,
        characteristic_decades: r.characteristic_decades,
        passed: r.passed,
    }
}

/// Result of [`run_all`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub suites: Vec<SuiteOutcome>,
    pub passed: bool,
}

impl RunReport {
    /// One line per suite and metric, sorted.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            let _ = writeln!(out, "{} {}", s.suite.as_str(), if s.passed { "PASS" } else { "FAIL" });
            for (k, v) in &s.metrics {
                let _ = writeln!(out, "  {k} = {v}");
            }
        }
        out
    }

    /// Writes every report file under `dir/<suite>/` and `dir/summary.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for s in &self.suites {
            let sub = dir.join(s.suite.as_str());
            std::fs::create_dir_all(&sub)?;
            for (name, content) in &s.files {
                std::fs::write(sub.join(name), content)?;
            }
        }
        #[derive(Serialize)]
        struct Line<'a> {
            suite: &'a str,
            passed: bool,
            metrics: &'a BTreeMap<String, f64>,
        }
        let lines: Vec<Line> = self
            .suites
            .iter()
            .map(|s| Line {
                suite: s.suite.as_str(),
                passed: s.passed,
                metrics: &s.metrics,
            })
            .collect();
        std::fs::write(dir.join("summary.json"), report_json(&lines))?;
        Ok(())
    }
}

/// Runs the selected suites in canonical order; an empty selection is a successful no-op.
pub fn run_all(cfg: &RunConfig, suites: &[Suite]) -> Result<RunReport> {
    let mut selected: Vec<Suite> = suites.to_vec();
    selected.sort();
    selected.dedup();
    let outcomes = selected.iter().map(|s| run_suite(*s, cfg)).collect::<Result<Vec<_>>>()?;
    let passed = outcomes.iter().all(|o| o.passed);
    Ok(RunReport {
        suites: outcomes,
        passed,
    })
}
