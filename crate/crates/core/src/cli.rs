//! Command-line experiment runner.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, WeightSetting};
use crate::ctmc::Stochasticity;
use crate::denoisers::{train_mg, ModelSet};
use crate::experiments::{self, BenchRow, HierarchyRow, SweepRow, WIDE_GRID};
use crate::flowcore::TimeGrid;
use crate::metrics::{MetricReport, RADAR_AXES};
use crate::sampler::{sample, ConditionMode, DiscreteFormat, GuidanceSpec, Method, SampleRequest, Weights};
use crate::toymol::{canonical_key, generate_dataset, is_valid, molecule_stability, property_oracle, Dataset};

const LOCK_FILE: &str = ".guidelab.lock";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "guidelab",
    version,
    about = "Guided hybrid flow-matching experiments on a toy molecular domain",
    after_help = "Settings resolve as built-in defaults, then the --config JSON file, then flags.\n\
                  Exit codes: 0 success, 2 config error, 3 runtime failure."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the dataset (and an optional model/evaluation split).
    GenData,
    /// Fit the main, guide and model-guidance models.
    Fit,
    /// Sample molecules with the configured guidance and score them.
    Sample,
    /// CFG weight grid over all four discrete formats.
    SweepFormats,
    /// Continuous-only, discrete-only and hybrid guidance curves.
    Hierarchy,
    /// Bayesian optimization of the guidance weights.
    Tune,
    /// Vanilla, CFG, AG and MG at their tuned weights, with radar scaling.
    Benchmark,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Fit => "fit",
            Command::Sample => "sample",
            Command::SweepFormats => "sweep-formats",
            Command::Hierarchy => "hierarchy",
            Command::Tune => "tune",
            Command::Benchmark => "benchmark",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Vanilla,
    Cfg,
    Ag,
    Mg,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Vanilla => Method::Vanilla,
            MethodArg::Cfg => Method::Cfg,
            MethodArg::Ag => Method::Ag,
            MethodArg::Mg => Method::Mg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    LinearProb,
    LogProb,
    LinearRate,
    LogRate,
}

impl From<FormatArg> for DiscreteFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::LinearProb => DiscreteFormat::LinearProb,
            FormatArg::LogProb => DiscreteFormat::LogProb,
            FormatArg::LinearRate => DiscreteFormat::LinearRate,
            FormatArg::LogRate => DiscreteFormat::LogRate,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset seed for gen-data; sampling and tuning seed elsewhere.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Integration steps; benchmark takes a comma list for the ablation.
    #[arg(long, global = true, value_delimiter = ',')]
    pub steps: Vec<usize>,
    /// CTMC remasking rate.
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    #[arg(long, global = true)]
    pub method: Option<MethodArg>,
    #[arg(long, global = true)]
    pub format: Option<FormatArg>,
    /// Continuous guidance weight; the embedded weight for model guidance.
    #[arg(long, global = true)]
    pub w1: Option<f64>,
    /// Discrete guidance weight.
    #[arg(long, global = true)]
    pub w2: Option<f64>,
    /// Four values (positions, atoms, charges, bonds), two values (w1 w2),
    /// or a single 2 or 4 selecting how many weights `tune` searches.
    #[arg(long, global = true, num_args = 1..=4)]
    pub weights: Vec<f64>,
    /// Dataset size for gen-data; molecules per evaluation elsewhere.
    #[arg(long, global = true)]
    pub count: Option<usize>,
    /// gen-data: fraction written to train.jsonl, rest to heldout.jsonl.
    #[arg(long, global = true)]
    pub split: Option<f64>,
}

/// Resolves the effective configuration for `command`.
pub fn resolve_config(command: Command, o: &Overrides) -> Result<RunConfig, CliError> {
    let mut c = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let gen = command == Command::GenData;
    if let Some(out) = &o.out {
        c.out = out.clone();
    }
    if let Some(s) = o.seed {
        if gen {
            c.dataset.seed = s;
        } else {
            c.sampling.seed = s;
            c.tune.seed = s;
        }
    }
    if let Some(n) = o.count {
        match command {
            Command::GenData => c.dataset.count = n,
            Command::Tune => c.tune.eval_count = n,
            _ => c.sampling.count = n,
        }
    }
    match (command, o.steps.as_slice()) {
        (_, []) => {}
        (Command::Benchmark, s) => c.benchmark.steps = s.to_vec(),
        (_, [s]) => c.sampling.steps = *s,
        _ => return Err(CliError::Config("--steps takes one value outside benchmark".into())),
    }
    if let Some(e) = o.eta {
        c.sampling.eta = e;
    }
    if let Some(m) = o.method {
        c.guidance.method = m.into();
    }
    if let Some(f) = o.format {
        c.guidance.format = f.into();
    }
    if let Some(f) = o.split {
        c.dataset.split = Some(f);
    }
    if !o.weights.is_empty() && (o.w1.is_some() || o.w2.is_some()) {
        return Err(CliError::Config("--weights conflicts with --w1/--w2".into()));
    }
    match *o.weights.as_slice() {
        [] => {}
        [d] if d == 2.0 || d == 4.0 => c.tune.four_weights = d == 4.0,
        [d] => return Err(CliError::Config(format!("--weights {d}: expected 2 or 4"))),
        ref ws => {
            let w = Weights::from_slice(ws)
                .ok_or_else(|| CliError::Config(format!("--weights takes 1, 2 or 4 values, got {}", ws.len())))?;
            c.guidance.weights = WeightSetting::Fixed(w);
            c.tune.four_weights = matches!(w, Weights::Four { .. });
        }
    }
    if c.guidance.method == Method::Mg {
        if let Some(w) = o.w1 {
            c.guidance.mg_weight = w;
        }
    } else if o.w1.is_some() || o.w2.is_some() {
        let (w1, w2) = match c.guidance.weights.fixed() {
            Some(Weights::Two { w1, w2 }) => (w1, w2),
            _ => (1.0, 1.0),
        };
        c.guidance.weights = WeightSetting::Fixed(Weights::Two {
            w1: o.w1.unwrap_or(w1),
            w2: o.w2.unwrap_or(w2),
        });
    }
    c.validate()?;
    Ok(c)
}

/// Exclusive use of an output directory for one command.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(runtime)?;
        let path = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                CliError::Runtime(format!(
                    "cannot lock {}: {e} (another command running? remove the file if stale)",
                    path.display()
                ))
            })?;
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli.command, &cli.overrides)?;
    let _lock = DirLock::acquire(&cfg.out)?;
    std::fs::write(cfg.out.join(format!("{}.config.json", cli.command.name())), cfg.to_json())
        .map_err(runtime)?;
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Fit => cmd_fit(&cfg),
        Command::Sample => cmd_sample(&cfg),
        Command::SweepFormats => cmd_sweep_formats(&cfg),
        Command::Hierarchy => cmd_hierarchy(&cfg),
        Command::Tune => cmd_tune(&cfg),
        Command::Benchmark => cmd_benchmark(&cfg),
    }
}

/// Parses arguments, runs, and maps errors to exit codes.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn request(cfg: &RunConfig, count: usize) -> Result<SampleRequest, CliError> {
    Ok(SampleRequest {
        count,
        grid: TimeGrid::new(cfg.sampling.steps).map_err(|e| CliError::Config(e.to_string()))?,
        seed: cfg.sampling.seed,
        condition: match cfg.sampling.target {
            Some(value) => ConditionMode::Target { value },
            None => ConditionMode::Joint,
        },
        eta: Stochasticity::new(cfg.sampling.eta)
            .ok_or_else(|| CliError::Config(format!("invalid eta {}", cfg.sampling.eta)))?,
    })
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let path = cfg.dataset_path();
    if !path.exists() {
        return Err(CliError::Config(format!(
            "dataset {} not found; run gen-data first",
            path.display()
        )));
    }
    Dataset::read_jsonl(&path).map_err(runtime)
}

/// Loads cached models, refitting the parts whose settings changed.
fn load_models(cfg: &RunConfig, ds: &Dataset, need_mg: bool) -> Result<ModelSet, CliError> {
    let path = cfg.models_path();
    let mut models = if path.exists() {
        ModelSet::load(&path, ds).map_err(runtime)?
    } else {
        log::warn!("{} not found; fitting models in memory", path.display());
        ModelSet::fit(ds, cfg.models.guide, None).map_err(runtime)?
    };
    if models.guide_spec != cfg.models.guide {
        log::info!("guide settings changed; rebuilding the guide");
        models = models.with_guide(ds, cfg.models.guide).map_err(runtime)?;
    }
    let stale = models.mg.as_ref().is_some_and(|m| m.config != cfg.models.mg);
    if need_mg && (models.mg.is_none() || stale) {
        log::info!("training model-guidance tables");
        models.mg = Some(train_mg(ds, &models.velocity, &models.posterior, cfg.models.mg).map_err(runtime)?);
    }
    Ok(models)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    for r in rows {
        w.serialize(r).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let f = File::create(path).map_err(runtime)?;
    serde_json::to_writer_pretty(f, value).map_err(runtime)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = generate_dataset(cfg.dataset.seed, cfg.dataset.count).map_err(runtime)?;
    let path = cfg.dataset_path();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(runtime)?;
    }
    ds.write_jsonl(&path).map_err(runtime)?;
    let valid = ds.molecules().iter().filter(|m| is_valid(m)).count() as f64 / ds.len() as f64;
    let (lo, hi) = ds
        .properties()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &c| (a.min(c), b.max(c)));
    println!(
        "{} molecules, validity {valid:.4}, property range [{lo:.4}, {hi:.4}] -> {}",
        ds.len(),
        path.display()
    );
    if let Some(f) = cfg.dataset.split {
        let (train, heldout) = ds.split(f, cfg.dataset.seed).map_err(runtime)?;
        let tp = cfg.out.join("train.jsonl");
        let hp = cfg.out.join("heldout.jsonl");
        train.write_jsonl(&tp).map_err(runtime)?;
        heldout.write_jsonl(&hp).map_err(runtime)?;
        println!("split {} / {} -> {}, {}", train.len(), heldout.len(), tp.display(), hp.display());
    }
    Ok(())
}

fn cmd_fit(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let models = ModelSet::fit(&ds, cfg.models.guide, Some(cfg.models.mg)).map_err(runtime)?;
    let path = cfg.models_path();
    models.save(&ds, &path).map_err(runtime)?;
    println!(
        "fitted {} position strata, {} token strata, {} model-guidance keys -> {}",
        models.velocity.strata.len(),
        models.posterior.strata().len(),
        models.mg.as_ref().map_or(0, |m| m.entries.len()),
        path.display()
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Incumbent {
    pub method: Method,
    pub format: DiscreteFormat,
    pub weights: Vec<f64>,
    pub mae: f64,
    pub config_hash: String,
    pub seed: u64,
}

fn incumbent_path(out: &Path, method: Method, four: bool) -> PathBuf {
    let suffix = if four && method != Method::Mg { "_4w" } else { "" };
    out.join(format!("tune_{}{suffix}.json", method.name()))
}

fn read_incumbent(out: &Path, method: Method, four: bool) -> Result<Option<Incumbent>, CliError> {
    let p = incumbent_path(out, method, four);
    if !p.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&p).map_err(runtime)?;
    Ok(Some(serde_json::from_str(&text).map_err(runtime)?))
}

/// Guidance spec from the config, resolving `"tune"` through a saved incumbent.
fn configured_spec(cfg: &RunConfig) -> Result<GuidanceSpec, CliError> {
    let g = &cfg.guidance;
    let weights = match g.weights {
        WeightSetting::Fixed(w) => w,
        WeightSetting::Tune(_) if g.method == Method::Vanilla => Weights::Two { w1: 1.0, w2: 1.0 },
        WeightSetting::Tune(_) => {
            let inc = read_incumbent(&cfg.out, g.method, cfg.tune.four_weights)?.ok_or_else(|| {
                CliError::Config(format!("weights are \"tune\" but no {} incumbent exists; run tune", g.method.name()))
            })?;
            if g.method == Method::Mg {
                return Ok(GuidanceSpec::mg(inc.weights[0]));
            }
            Weights::from_slice(&inc.weights).ok_or_else(|| runtime("malformed incumbent"))?
        }
    };
    Ok(match g.method {
        Method::Vanilla => GuidanceSpec::vanilla(),
        Method::Mg => GuidanceSpec::mg(g.mg_weight),
        m => GuidanceSpec {
            method: m,
            weights,
            ..GuidanceSpec::cfg(g.format, 1.0, 1.0)
        },
    })
}

#[derive(Serialize)]
struct SampleRow {
    config_hash: String,
    seed: u64,
    index: usize,
    n_atoms: usize,
    bin: usize,
    target: f64,
    property: f64,
    abs_error: f64,
    valid: bool,
    stable: bool,
    key: String,
}

#[derive(Serialize)]
struct ReportRow {
    config_hash: String,
    seed: u64,
    label: String,
    method: &'static str,
    format: &'static str,
    w_positions: f64,
    w_atoms: f64,
    w_charges: f64,
    w_bonds: f64,
    mg_weight: f64,
    steps: usize,
    count: usize,
    property_mae: f64,
    molecule_stability_ratio: f64,
    validity_ratio: f64,
    valid_and_unique_ratio: f64,
    bond_entropy: f64,
    element_entropy: f64,
    forward_passes: u32,
}

impl ReportRow {
    fn new(cfg: &RunConfig, label: &str, spec: &GuidanceSpec, steps: usize, r: &MetricReport) -> Self {
        use crate::flowcore::Modality;
        let w = &spec.weights;
        ReportRow {
            config_hash: cfg.hash(),
            seed: cfg.sampling.seed,
            label: label.to_string(),
            method: spec.method.name(),
            format: spec.format.name(),
            w_positions: w.continuous(),
            w_atoms: w.discrete(Modality::AtomTypes),
            w_charges: w.discrete(Modality::Charges),
            w_bonds: w.discrete(Modality::Bonds),
            mg_weight: spec.mg_weight,
            steps,
            count: r.count,
            property_mae: r.property_mae,
            molecule_stability_ratio: r.molecule_stability_ratio,
            validity_ratio: r.validity_ratio,
            valid_and_unique_ratio: r.valid_and_unique_ratio,
            bond_entropy: r.bond_entropy,
            element_entropy: r.element_entropy,
            forward_passes: r.forward_passes,
        }
    }
}

fn cmd_sample(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = configured_spec(cfg)?;
    let ds = load_dataset(cfg)?;
    let models = load_models(cfg, &ds, spec.method == Method::Mg)?;
    let req = request(cfg, cfg.sampling.count)?;
    let start = std::time::Instant::now();
    let samples = sample(&spec, &models, &ds, &req).map_err(runtime)?;
    let secs = start.elapsed().as_secs_f64();
    let hash = cfg.hash();
    let rows: Vec<SampleRow> = samples
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let property = property_oracle(&s.molecule);
            SampleRow {
                config_hash: hash.clone(),
                seed: cfg.sampling.seed,
                index,
                n_atoms: s.molecule.n_atoms(),
                bin: s.bin,
                target: s.target,
                property,
                abs_error: (property - s.target).abs(),
                valid: is_valid(&s.molecule),
                stable: molecule_stability(&s.molecule).molecule_stable,
                key: canonical_key(&s.molecule),
            }
        })
        .collect();
    write_csv(&cfg.out.join("samples.csv"), &rows)?;
    let report = MetricReport::from_samples(&samples, secs, spec.method.forward_passes()).map_err(runtime)?;
    write_csv(
        &cfg.out.join("report.csv"),
        &[ReportRow::new(cfg, spec.method.name(), &spec, cfg.sampling.steps, &report)],
    )?;
    write_json(&cfg.out.join("report.json"), &report)?;
    println!(
        "{} molecules: MAE {:.4}, validity {:.4}, valid+unique {:.4}, {:.2}s",
        report.count, report.property_mae, report.validity_ratio, report.valid_and_unique_ratio, secs
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepCsvRow {
    config_hash: String,
    seed: u64,
    format: &'static str,
    w1: f64,
    w2: f64,
    property_mae: f64,
    validity_ratio: f64,
    valid_and_unique_ratio: f64,
    molecule_stability_ratio: f64,
}

fn cmd_sweep_formats(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let models = load_models(cfg, &ds, false)?;
    let req = request(cfg, cfg.sampling.count)?;
    let rows = experiments::sweep_formats(&models, &ds, &req).map_err(runtime)?;
    let hash = cfg.hash();
    let csv_rows: Vec<SweepCsvRow> = rows
        .iter()
        .map(|r: &SweepRow| SweepCsvRow {
            config_hash: hash.clone(),
            seed: cfg.sampling.seed,
            format: r.format.name(),
            w1: r.w1,
            w2: r.w2,
            property_mae: r.report.property_mae,
            validity_ratio: r.report.validity_ratio,
            valid_and_unique_ratio: r.report.valid_and_unique_ratio,
            molecule_stability_ratio: r.report.molecule_stability_ratio,
        })
        .collect();
    write_csv(&cfg.out.join("sweep_formats.csv"), &csv_rows)?;
    for f in DiscreteFormat::ALL {
        let best = rows
            .iter()
            .filter(|r| r.format == f)
            .min_by(|a, b| a.report.property_mae.total_cmp(&b.report.property_mae))
            .expect("grid nonempty");
        println!(
            "{:12} best MAE {:.4} at w1={} w2={} (validity {:.4})",
            f.name(),
            best.report.property_mae,
            best.w1,
            best.w2,
            best.report.validity_ratio
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct HierarchyCsvRow {
    config_hash: String,
    seed: u64,
    method: &'static str,
    format: &'static str,
    curve: &'static str,
    w: f64,
    w1: f64,
    w2: f64,
    property_mae: f64,
    validity_ratio: f64,
    valid_and_unique_ratio: f64,
}

fn cmd_hierarchy(cfg: &RunConfig) -> Result<(), CliError> {
    let method = match cfg.guidance.method {
        m @ (Method::Cfg | Method::Ag) => m,
        m => return Err(CliError::Config(format!("hierarchy needs --method cfg or ag, got {}", m.name()))),
    };
    let ds = load_dataset(cfg)?;
    let models = load_models(cfg, &ds, false)?;
    let req = request(cfg, cfg.sampling.count)?;
    let rows =
        experiments::hierarchy(&models, &ds, &req, method, cfg.guidance.format, &WIDE_GRID).map_err(runtime)?;
    let hash = cfg.hash();
    let csv_rows: Vec<HierarchyCsvRow> = rows
        .iter()
        .map(|r: &HierarchyRow| HierarchyCsvRow {
            config_hash: hash.clone(),
            seed: cfg.sampling.seed,
            method: method.name(),
            format: cfg.guidance.format.name(),
            curve: r.curve.name(),
            w: r.w,
            w1: r.w1,
            w2: r.w2,
            property_mae: r.report.property_mae,
            validity_ratio: r.report.validity_ratio,
            valid_and_unique_ratio: r.report.valid_and_unique_ratio,
        })
        .collect();
    write_csv(&cfg.out.join("hierarchy.csv"), &csv_rows)?;
    for (curve, (w, mae)) in experiments::curve_optima(&rows) {
        println!("{:16} optimum MAE {mae:.4} at w={w}", curve.name());
    }
    Ok(())
}

fn cmd_tune(cfg: &RunConfig) -> Result<(), CliError> {
    let method = cfg.guidance.method;
    if method == Method::Vanilla {
        return Err(CliError::Config("tune needs --method cfg, ag or mg".into()));
    }
    let four = cfg.tune.four_weights;
    let ds = load_dataset(cfg)?;
    let models = load_models(cfg, &ds, method == Method::Mg)?;
    let req = request(cfg, cfg.tune.eval_count)?;
    let problem = experiments::tune_problem(method, four, cfg.tune.n_initial, cfg.tune.n_iterations, cfg.tune.seed);
    let result =
        experiments::tune(&models, &ds, &req, method, cfg.guidance.format, &problem).map_err(runtime)?;
    let hash = cfg.hash();
    let inc_path = incumbent_path(&cfg.out, method, four);
    let trace_path = inc_path.with_extension("csv");
    let mut w = csv::Writer::from_path(&trace_path).map_err(runtime)?;
    let mut header = vec!["config_hash".to_string(), "seed".into(), "iteration".into()];
    header.extend((1..=problem.dim()).map(|i| format!("w{i}")));
    header.extend(["mae".into(), "incumbent_mae".into()]);
    w.write_record(&header).map_err(runtime)?;
    for r in &result.trace {
        let mut rec = vec![hash.clone(), cfg.tune.seed.to_string(), r.iteration.to_string()];
        rec.extend(r.weights.iter().map(|v| v.to_string()));
        rec.extend([r.value.to_string(), r.incumbent.to_string()]);
        w.write_record(&rec).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    let inc = Incumbent {
        method,
        format: cfg.guidance.format,
        weights: result.best_weights.clone(),
        mae: result.best_value,
        config_hash: hash,
        seed: cfg.tune.seed,
    };
    write_json(&inc_path, &inc)?;
    println!(
        "{} incumbent {:?} with MAE {:.4} after {} evaluations",
        method.name(),
        inc.weights,
        inc.mae,
        result.trace.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct RadarRow {
    config_hash: String,
    seed: u64,
    steps: usize,
    label: String,
    property_alignment: f64,
    validity: f64,
    uniqueness: f64,
    efficiency: f64,
}

#[derive(Serialize)]
struct BenchJson<'a> {
    steps: usize,
    label: &'a str,
    spec: &'a GuidanceSpec,
    report: &'a MetricReport,
}

fn cmd_benchmark(cfg: &RunConfig) -> Result<(), CliError> {
    let format = cfg.guidance.format;
    let two = |method: Method, fallback: Weights| -> Result<GuidanceSpec, CliError> {
        let w = match read_incumbent(&cfg.out, method, false)? {
            Some(inc) => Weights::from_slice(&inc.weights).ok_or_else(|| runtime("malformed incumbent"))?,
            None => fallback,
        };
        Ok(GuidanceSpec {
            method,
            weights: w,
            ..GuidanceSpec::cfg(format, 1.0, 1.0)
        })
    };
    let mg_weight = read_incumbent(&cfg.out, Method::Mg, false)?
        .map_or(cfg.benchmark.mg_weight, |inc| inc.weights[0]);
    let entries = vec![
        ("vanilla".to_string(), GuidanceSpec::vanilla()),
        ("cfg".to_string(), two(Method::Cfg, cfg.benchmark.cfg)?),
        ("ag".to_string(), two(Method::Ag, cfg.benchmark.ag)?),
        ("mg".to_string(), GuidanceSpec::mg(mg_weight)),
    ];
    let ds = load_dataset(cfg)?;
    let models = load_models(cfg, &ds, true)?;
    let req = request(cfg, cfg.sampling.count)?;
    let rows = experiments::benchmark(&models, &ds, &req, &entries, &cfg.benchmark.steps).map_err(runtime)?;
    let report_rows: Vec<ReportRow> = rows
        .iter()
        .map(|r: &BenchRow| ReportRow::new(cfg, &r.label, &r.spec, r.steps, &r.report))
        .collect();
    write_csv(&cfg.out.join("benchmark.csv"), &report_rows)?;
    let hash = cfg.hash();
    let radar: Vec<RadarRow> = rows
        .iter()
        .map(|r| {
            let s = |axis: &str| r.report.scaled[axis];
            RadarRow {
                config_hash: hash.clone(),
                seed: cfg.sampling.seed,
                steps: r.steps,
                label: r.label.clone(),
                property_alignment: s(RADAR_AXES[0].0),
                validity: s(RADAR_AXES[1].0),
                uniqueness: s(RADAR_AXES[2].0),
                efficiency: s(RADAR_AXES[3].0),
            }
        })
        .collect();
    write_csv(&cfg.out.join("radar.csv"), &radar)?;
    let json: Vec<BenchJson> = rows
        .iter()
        .map(|r| BenchJson {
            steps: r.steps,
            label: &r.label,
            spec: &r.spec,
            report: &r.report,
        })
        .collect();
    write_json(&cfg.out.join("benchmark.json"), &json)?;
    for r in &rows {
        println!(
            "steps {:4} {:8} MAE {:.4} validity {:.4} valid+unique {:.4} passes {} {:.2}s",
            r.steps,
            r.label,
            r.report.property_mae,
            r.report.validity_ratio,
            r.report.valid_and_unique_ratio,
            r.report.forward_passes,
            r.report.sampling_seconds
        );
    }
    Ok(())
}
