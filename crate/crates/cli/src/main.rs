//! `sparsedom`: command-line driver for the verification campaigns.
//!
//! Every subcommand writes CSV and JSON reports under `--out` and exits with
//! 0 when its verdict passes, 1 when it fails and 2 on errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sparsedom::convex::{
    check_vector_stopping, default_dilation, john_ellipsoid, john_sandwich, minkowski_product, vector_stopping,
};
use sparsedom::czd::{cancellation_check, cz_decompose, cz_report, mainiter_check, mainitervec_check};
use sparsedom::dyadic::{DyadicCube, GridFunction};
use sparsedom::format::{
    fmt_f64, read_grid_csv, read_shift, read_zonotope_csv, write_collection_csv, write_grid_csv, write_shift,
};
use sparsedom::harness::{
    compare_campaigns, report_json, run_all, vector_input, verify_scalar_domination, verify_vector_domination,
    CampaignConfig, InputKind, RunConfig, Suite, REPRODUCTION_TOL,
};
use sparsedom::numeric::derive_seed;
use sparsedom::shift::{normalize_a2, random_shift, A2Strategy, RandomShiftSpec, Selection, EXACT_SMALL_LIMIT};
use sparsedom::sparse::{
    build_sparse_collection, build_vector_collection, sparse_form, sparse_form_body, stopping_children, verify_sparse,
};
use sparsedom::weights::{parse_grid_spec, weighted_sweep, WeightFamily};
use sparsedom::Error;

#[derive(Parser, Debug)]
#[command(name = "sparsedom", version, about = "Sparse domination experiments for dyadic shifts")]
struct Cli {
    /// JSON run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV and JSON reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Master seed; replaces every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stopping-time collections.
    #[command(subcommand)]
    Sparse(SparseCmd),
    /// Read or generate a shift, check its certificate and round-trip its file.
    Shift(ShiftArgs),
    /// Calderón–Zygmund decomposition on the root cube.
    Czd(CzdArgs),
    /// Zonotope geometry.
    #[command(subcommand)]
    Convex(ConvexCmd),
    /// Matrix-weighted experiments.
    #[command(subcommand)]
    Weights(WeightsCmd),
    /// Scalar domination campaign.
    VerifyScalar(CampaignArgs),
    /// Vector domination campaign.
    VerifyVector(VectorArgs),
    /// Run suites and write all reports.
    RunAll(RunAllArgs),
    /// Write a generated input function as grid CSV.
    Sample(SampleArgs),
}

#[derive(Subcommand, Debug)]
enum SparseCmd {
    /// Build the collection of a pair of grid functions.
    Build {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        input2: PathBuf,
        /// Stopping threshold (scalar) or dilation (vector); defaults to 2^8 n².
        #[arg(long)]
        lambda: Option<f64>,
        /// Sparseness to verify; defaults to 2^-d (1 - 2^-7), the bound for the root with its trees.
        #[arg(long)]
        eta: Option<f64>,
    },
}

#[derive(Args, Debug)]
struct ShiftArgs {
    /// Shift file to read; without it a random shift is generated.
    #[arg(long)]
    shift_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    finest: u32,
    #[arg(long, default_value_t = 2)]
    rho: u32,
    #[arg(long, default_value_t = 0.3)]
    density: f64,
    #[arg(long)]
    cancellative: bool,
    /// Re-normalize with this strategy.
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Optional pair to evaluate the form on.
    #[arg(long, requires = "input2")]
    input: Option<PathBuf>,
    #[arg(long, requires = "input")]
    input2: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StrategyArg {
    ExactSmall,
    ScaleCount,
    HaarBessel,
}

impl From<StrategyArg> for A2Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::ExactSmall => A2Strategy::ExactSmall,
            StrategyArg::ScaleCount => A2Strategy::ScaleCount,
            StrategyArg::HaarBessel => A2Strategy::HaarBessel,
        }
    }
}

#[derive(Args, Debug)]
struct CzdArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    input2: PathBuf,
    /// Shift for the main-iteration check.
    #[arg(long)]
    shift_file: Option<PathBuf>,
    #[arg(long, default_value_t = 256.0)]
    lambda: f64,
}

#[derive(Subcommand, Debug)]
enum ConvexCmd {
    /// John ellipsoid of a zonotope and its sandwich margins.
    John {
        #[arg(long)]
        body: PathBuf,
    },
    /// Minkowski product `sup_{x∈K, y∈H} ⟨x, y⟩`.
    Product {
        #[arg(long)]
        body: PathBuf,
        #[arg(long)]
        body2: PathBuf,
    },
    /// Vector stopping cubes of a grid function on the root cube.
    Stopping {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        dilation: Option<f64>,
    },
}

#[derive(Subcommand, Debug)]
enum WeightsCmd {
    /// Weighted norms across a family parameter grid.
    Sweep {
        #[arg(long, default_value = "rotating")]
        family: String,
        /// `lo:hi:count`.
        #[arg(long)]
        a_grid: Option<String>,
        #[arg(long)]
        shift_seed: Option<u64>,
        #[arg(long)]
        weight_seed: Option<u64>,
        #[arg(long)]
        shifts: Option<usize>,
        #[arg(long)]
        finest: Option<u32>,
        #[arg(long)]
        n: Option<usize>,
    },
}

#[derive(Args, Debug, Clone)]
struct CampaignArgs {
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    finest: Option<u32>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    rho_max: Option<u32>,
    #[arg(long)]
    shifts_per_rho: Option<usize>,
}

impl CampaignArgs {
    fn apply(&self, c: &mut CampaignConfig) {
        if let Some(v) = self.trials {
            c.trials = v;
        }
        if let Some(v) = self.finest {
            c.finest = v;
        }
        if let Some(v) = self.dim {
            c.dim = v;
        }
        if let Some(v) = self.rho_max {
            c.rho_max = v;
        }
        if let Some(v) = self.shifts_per_rho {
            c.shifts_per_rho = v;
        }
    }
}

#[derive(Args, Debug)]
struct VectorArgs {
    #[command(flatten)]
    campaign: CampaignArgs,
    #[arg(long)]
    n: Option<usize>,
    /// Skip the n = 1 reproduction of the scalar campaign.
    #[arg(long)]
    no_reproduce: bool,
}

#[derive(Args, Debug)]
struct RunAllArgs {
    /// Comma-separated suites, or `all`.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Reduced sizes.
    #[arg(long)]
    quick: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long, default_value = "spikes")]
    kind: String,
    #[arg(long, default_value_t = 1)]
    dim: usize,
    #[arg(long, default_value_t = 10)]
    finest: u32,
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// File name under `--out`.
    #[arg(long, default_value = "f.csv")]
    name: String,
}

type Res<T> = Result<T, Error>;

fn read(path: &Path) -> Res<String> {
    Ok(std::fs::read_to_string(path)?)
}

fn grid(path: &Path) -> Res<GridFunction> {
    read_grid_csv(&read(path)?)
}

fn write(out: &Path, name: &str, content: &str) -> Res<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(name), content)?;
    Ok(())
}

fn load_config(cli: &Cli, quick: bool) -> Res<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::from_json(&read(p)?)?,
        None if quick => RunConfig::quick(),
        None => RunConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "PASS"
    } else {
        "FAIL"
    }
}

fn sparse_build(cli: &Cli, input: &Path, input2: &Path, lambda: Option<f64>, eta: Option<f64>) -> Res<bool> {
    let (f1, f2) = (grid(input)?, grid(input2)?);
    let eta = eta.unwrap_or((1.0 - 1.0 / 128.0) / (1u64 << f1.dim()) as f64);
    let n = f1.n();
    let (s, form, exact) = if n == 1 {
        let s = build_sparse_collection(&f1, &f2, lambda.unwrap_or(default_dilation(1)))?;
        let form = sparse_form(&s, &f1, &f2)?;
        (s, form, true)
    } else {
        let (s, exact_stop) = build_vector_collection(&f1, &f2, lambda.unwrap_or(default_dilation(n)))?;
        let (form, exact) = sparse_form_body(&s, &f1, &f2)?;
        (s, form, exact && exact_stop)
    };
    let rep = verify_sparse(&s, eta)?;
    write(&cli.out, "collection.csv", &write_collection_csv(&s))?;
    write(&cli.out, "sparsity.json", &report_json(&rep))?;
    println!("cubes {}", s.len());
    println!("sparse form {}", fmt_f64(form));
    println!("exact {exact}");
    println!("feasible eta {}", rep.feasible_eta);
    println!("stored eta {}", rep.stored_eta);
    println!("sparse build {}", verdict(rep.passed));
    Ok(rep.passed)
}

fn shift_cmd(cli: &Cli, a: &ShiftArgs) -> Res<bool> {
    let mut shift = match &a.shift_file {
        Some(p) => read_shift(&read(p)?)?,
        None => {
            let mut spec = RandomShiftSpec::new(a.dim, a.finest, a.rho, a.density);
            spec.cancellative = a.cancellative;
            spec.strategy = a.strategy.map(Into::into);
            random_shift(cli.seed.unwrap_or(0), &spec)?
        }
    };
    if let (Some(s), Some(_)) = (a.strategy, &a.shift_file) {
        shift = normalize_a2(&shift, s.into(), EXACT_SMALL_LIMIT)?;
    }
    let text = write_shift(&shift);
    let back = read_shift(&text)?;
    let round_trip = write_shift(&back) == text && back == shift;
    let source_identical = match &a.shift_file {
        Some(p) if a.strategy.is_none() => {
            let original = read_shift(&read(p)?)?;
            original == back
        }
        _ => true,
    };
    write(&cli.out, "shift.txt", &text)?;
    let cert = shift.certificate();
    println!("kernels {}", shift.len());
    println!("rho {} (m1 {}, m2 {})", shift.rho(), shift.m1(), shift.m2());
    println!("certificate {} factor {} bound {}", cert.strategy.as_str(), fmt_f64(cert.factor), fmt_f64(cert.bound));
    println!("round trip {}", if round_trip && source_identical { "bit-exact" } else { "MISMATCH" });
    if let (Some(p1), Some(p2)) = (&a.input, &a.input2) {
        let (f1, f2) = (grid(p1)?, grid(p2)?);
        let form = shift.form(&f1, &f2, Selection::All)?;
        println!("form {}", fmt_f64(form));
    }
    let passed = round_trip && source_identical && cert.is_certified() && cert.bound <= 1.0 + 1e-9;
    println!("shift {}", verdict(passed));
    Ok(passed)
}

fn czd_cmd(cli: &Cli, a: &CzdArgs) -> Res<bool> {
    let (f1, f2) = (grid(&a.input)?, grid(&a.input2)?);
    let q = DyadicCube::root(f1.dim());
    let mut passed = true;
    if f1.n() == 1 {
        let st = stopping_children(&f1, &f2, &q, a.lambda)?;
        let d1 = cz_decompose(&f1, &q, &st)?;
        let d2 = cz_decompose(&f2, &q, &st)?;
        let r1 = cz_report(&f1, &d1, a.lambda)?;
        let r2 = cz_report(&f2, &d2, a.lambda)?;
        write(&cli.out, "cz_f1.json", &report_json(&r1))?;
        write(&cli.out, "cz_f2.json", &report_json(&r2))?;
        write(&cli.out, "good_f1.csv", &write_grid_csv(&d1.good))?;
        write(&cli.out, "good_f2.csv", &write_grid_csv(&d2.good))?;
        println!("stopping cubes {}", st.len());
        for (name, r) in [("f1", &r1), ("f2", &r2)] {
            println!(
                "{name}: linf {} / {}, bad ratio {}, reconstruction {:e}, mean zero {:e}",
                fmt_f64(r.linf),
                fmt_f64(r.linf_bound),
                r.bad_ratio,
                r.reconstruction_error,
                r.mean_zero_error
            );
        }
        passed &= r1.passed && r2.passed;
        if let Some(p) = &a.shift_file {
            let shift = read_shift(&read(p)?)?;
            let c1 = cancellation_check(&shift, &d1.good, &d2, true)?;
            let c2 = cancellation_check(&shift, &d2.good, &d1, false)?;
            let m = mainiter_check(&shift, &f1, &f2, &q)?;
            write(&cli.out, "mainiter.json", &report_json(&m))?;
            println!("cancellation pairs {} max rel {:e}", c1.pairs + c2.pairs, c1.max_rel.max(c2.max_rel));
            println!("main iteration residual {} envelope {}", fmt_f64(m.residual), fmt_f64(m.envelope));
            passed &= m.passed && c1.max_rel.max(c2.max_rel) <= 1e-12;
        }
    } else {
        let Some(p) = &a.shift_file else {
            return Err(Error::InvalidParameter("vector inputs need --shift-file".into()));
        };
        let shift = read_shift(&read(p)?)?;
        let m = mainitervec_check(&shift, &f1, &f2, &q)?;
        write(&cli.out, "mainitervec.json", &report_json(&m))?;
        println!("stopping cubes {}", m.stopping);
        println!("residual {} envelope {}", fmt_f64(m.residual), fmt_f64(m.envelope));
        passed &= m.passed;
    }
    println!("czd {}", verdict(passed));
    Ok(passed)
}

fn convex_cmd(cli: &Cli, c: &ConvexCmd) -> Res<bool> {
    match c {
        ConvexCmd::John { body } => {
            let k = read_zonotope_csv(&read(body)?)?;
            let e = john_ellipsoid(&k)?;
            let s = john_sandwich(&k, &e)?;
            println!("shape matrix (rows):");
            for r in 0..e.n {
                let row: Vec<String> = (0..e.n).map(|c| fmt_f64(e.shape[(r, c)])).collect();
                println!("  {}", row.join(" "));
            }
            println!("kappa {}", e.kappa);
            println!("inner margin {} (E ⊂ K when ≤ 1)", s.inner);
            println!("outer margin {} (K ⊂ sqrt(n) E when ≤ 1)", s.outer);
            println!("exact {}", s.exact);
            write(&cli.out, "john.json", &report_json(&(&e, &s)))?;
            let passed = s.holds(1e-6);
            println!("john {}", verdict(passed));
            Ok(passed)
        }
        ConvexCmd::Product { body, body2 } => {
            let k = read_zonotope_csv(&read(body)?)?;
            let h = read_zonotope_csv(&read(body2)?)?;
            let p = minkowski_product(&k, &h)?;
            println!("product {}", fmt_f64(p.value));
            println!("upper {}", fmt_f64(p.upper));
            println!("exact {}", p.exact);
            write(&cli.out, "product.json", &report_json(&p))?;
            Ok(p.exact)
        }
        ConvexCmd::Stopping { input, dilation } => {
            let f = grid(input)?;
            let q = DyadicCube::root(f.dim());
            let a = dilation.unwrap_or(default_dilation(f.n()));
            let st = vector_stopping(&f, &q, a)?;
            let r = check_vector_stopping(&f, &q, a, &st.cubes)?;
            write(&cli.out, "stopping.json", &report_json(&(&st, &r)))?;
            println!("stopping cubes {}", st.cubes.len());
            println!("containment ratio {}", r.containment_ratio);
            println!("packing {} bound {}", r.packing, r.packing_bound);
            let passed = r.containment_ratio <= 1.0 + 1e-9 && r.packing_ok;
            println!("stopping {}", verdict(passed));
            Ok(passed)
        }
    }
}

fn weights_cmd(cli: &Cli, c: &WeightsCmd) -> Res<bool> {
    let WeightsCmd::Sweep {
        family,
        a_grid,
        shift_seed,
        weight_seed,
        shifts,
        finest,
        n,
    } = c;
    let mut cfg = load_config(cli, false)?.weights;
    cfg.family = WeightFamily::parse(family)
        .ok_or_else(|| Error::InvalidParameter(format!("unknown weight family {family:?}")))?;
    if let Some(g) = a_grid {
        cfg.params = parse_grid_spec(g)?;
    }
    if let Some(s) = shift_seed {
        cfg.shift_seed = *s;
    }
    if let Some(s) = weight_seed {
        cfg.weight_seed = *s;
    }
    if let Some(s) = shifts {
        cfg.shifts = *s;
    }
    if let Some(l) = finest {
        cfg.finest = *l;
    }
    if let Some(k) = n {
        cfg.n = *k;
    }
    let r = weighted_sweep(&cfg)?;
    write(&cli.out, "weights_sweep.csv", &r.to_csv())?;
    write(&cli.out, "weights_sweep.json", &report_json(&r))?;
    print!("{}", r.to_csv());
    println!("slope {:?}", r.slope);
    println!("characteristic decades {:.3}", r.characteristic_decades);
    println!("max ratio {}", r.max_ratio);
    println!("weights sweep {}", verdict(r.passed));
    Ok(r.passed)
}

fn campaign_summary(name: &str, r: &sparsedom::harness::DominationReport) {
    println!("{name}: {} rows, {} discarded", r.rows.len(), r.discarded);
    for p in &r.per_rho {
        println!(
            "  rho {}: max ratio {:.6e}, median {:.6e}, max undivided {:.6e}",
            p.rho, p.max_ratio, p.median_ratio, p.max_undivided
        );
    }
    println!("  max ratio {:.6e} envelope {}", r.max_ratio, r.envelope);
    println!("  rho exponent {:?} (envelope {:?})", r.rho_exponent, r.slope_envelope);
    for b in r.breaches.iter().take(10) {
        println!("  breach trial {} seed {} rho {} ratio {}", b.trial, b.seed, b.rho, b.ratio);
    }
}

fn write_campaign(out: &Path, name: &str, r: &sparsedom::harness::DominationReport) -> Res<()> {
    write(out, &format!("{name}_trials.csv"), &r.to_csv())?;
    let mut summary = r.clone();
    summary.rows.clear();
    write(out, &format!("{name}.json"), &report_json(&summary))
}

fn verify_scalar(cli: &Cli, a: &CampaignArgs) -> Res<bool> {
    let mut cfg = load_config(cli, false)?.scalar;
    a.apply(&mut cfg);
    let r = verify_scalar_domination(&cfg)?;
    write_campaign(&cli.out, "scalar", &r)?;
    campaign_summary("scalar", &r);
    println!("verify-scalar {}", verdict(r.passed));
    Ok(r.passed)
}

fn verify_vector(cli: &Cli, a: &VectorArgs) -> Res<bool> {
    let run = load_config(cli, false)?;
    let mut cfg = run.vector.campaign.clone();
    a.campaign.apply(&mut cfg);
    if let Some(n) = a.n {
        cfg.n = n;
    }
    let r = verify_vector_domination(&cfg)?;
    write_campaign(&cli.out, "vector", &r)?;
    campaign_summary("vector", &r);
    let mut passed = r.passed;
    if run.vector.reproduce_scalar && !a.no_reproduce {
        let mut one = run.scalar.clone();
        a.campaign.apply(&mut one);
        let s = verify_scalar_domination(&one)?;
        let v = verify_vector_domination(&one)?;
        let e = compare_campaigns(&s, &v);
        match e {
            Some(e) => println!("n=1 reproduction max relative difference {e:e}"),
            None => println!("n=1 reproduction: rows differ"),
        }
        passed &= e.is_some_and(|e| e <= REPRODUCTION_TOL);
    }
    println!("verify-vector {}", verdict(passed));
    Ok(passed)
}

fn parse_suites(s: &str) -> Res<Vec<Suite>> {
    if s == "all" {
        return Ok(Suite::ALL.to_vec());
    }
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| Suite::parse(x).ok_or_else(|| Error::InvalidParameter(format!("unknown suite {x:?}"))))
        .collect()
}

fn run_all_cmd(cli: &Cli, a: &RunAllArgs) -> Res<bool> {
    let cfg = load_config(cli, a.quick)?;
    let suites = parse_suites(&a.suite)?;
    let r = run_all(&cfg, &suites)?;
    r.write(&cli.out)?;
    print!("{}", r.summary());
    println!("run-all {}", verdict(r.passed));
    Ok(r.passed)
}

fn sample_cmd(cli: &Cli, a: &SampleArgs) -> Res<bool> {
    let kind = match a.kind.as_str() {
        "spikes" => InputKind::Spikes,
        "random-signs" => InputKind::RandomSigns,
        "ramp" => InputKind::Ramp,
        "alternating" => InputKind::Alternating,
        "zero" => InputKind::Zero,
        k => return Err(Error::InvalidParameter(format!("unknown input kind {k:?}"))),
    };
    let seed = derive_seed(cli.seed.unwrap_or(0), 0x5a);
    let f = vector_input(kind, &Default::default(), a.dim, a.finest, a.n, seed)?;
    write(&cli.out, &a.name, &write_grid_csv(&f))?;
    println!("wrote {}", cli.out.join(&a.name).display());
    Ok(true)
}

fn run(cli: &Cli) -> Res<bool> {
    match &cli.command {
        Command::Sparse(SparseCmd::Build {
            input,
            input2,
            lambda,
            eta,
        }) => sparse_build(cli, input, input2, *lambda, *eta),
        Command::Shift(a) => shift_cmd(cli, a),
        Command::Czd(a) => czd_cmd(cli, a),
        Command::Convex(c) => convex_cmd(cli, c),
        Command::Weights(c) => weights_cmd(cli, c),
        Command::VerifyScalar(a) => verify_scalar(cli, a),
        Command::VerifyVector(a) => verify_vector(cli, a),
        Command::RunAll(a) => run_all_cmd(cli, a),
        Command::Sample(a) => sample_cmd(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
