//! Command-line front end.
//!
//! Every subcommand resolves its settings from built-in defaults, then an
//! optional `--config` JSON file (a plain settings object or a manifest written
//! by a previous run), then explicit flags. The resolved settings are echoed
//! into a manifest next to the primary output, so passing that manifest back as
//! `--config` reproduces the run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{generate_synthetic, load_cohort, read_cohort, write_cohort, Cohort, SchemaConfig, SyntheticSpec, TaskKind};
use crate::engine::{find_worst_case, FwParams, WorstCaseReport};
use crate::error::{Error, ErrorClass, Result};
use crate::evaluation::{
    aggregate_matrices, cross_evaluate, curve_csv, diagonal_normalize, heatmap_svg, matrix_csv, mean_curve,
    oracle_ratio_curve, read_matrix_csv, trace_csv, CrossMetricMatrix, EvalParams,
};
use crate::losses::LossSpec;
use crate::oracle::{enumerate_problems, exact_expected_dl, oracle_maximize};
use crate::predictors::{score_cohort, train, Predictor, PredictorKind, ScoredCohort, TrainConfig, TrainLoss};
use crate::uncertainty::UncertaintyBudget;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Parser, Debug)]
#[command(name = "wcshift", version, about = "Worst-case distribution shift search for predictive resource allocation")]
pub struct Cli {
    /// Upper bound on worker threads [default: available parallelism]
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic two-level cohort as JSON
    Generate(GenerateArgs),
    /// Fit a logistic or MLP predictor
    Train(TrainArgs),
    /// Search for the worst-case hierarchical shift for one loss
    FindWorst(FindWorstArgs),
    /// Evaluate converged shifts on a set of metrics
    Evaluate(EvaluateArgs),
    /// Exact multi-start maximizer on small pools
    Oracle(OracleArgs),
    /// Ratio of Frank-Wolfe to oracle value across sample counts
    Fig2(Fig2Args),
    /// Normalize and aggregate replicate matrices
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON settings file or a manifest from an earlier run
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Where to write the run manifest [default: next to --out]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Number of instances [default: 20]
    #[arg(long)]
    pub instances: Option<usize>,
    /// Individuals per instance [default: 8]
    #[arg(long)]
    pub pool_size: Option<usize>,
    /// Numeric features [default: 3]
    #[arg(long)]
    pub features: Option<usize>,
    /// binary-classification or regression [default: binary-classification]
    #[arg(long)]
    pub task: Option<String>,
    /// Protected groups [default: 2]
    #[arg(long)]
    pub groups: Option<usize>,
    /// Costs are drawn from 1..=max-cost [default: 5]
    #[arg(long)]
    pub max_cost: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub instances: usize,
    pub pool_size: usize,
    pub features: usize,
    pub task: TaskKind,
    pub groups: usize,
    pub max_cost: u32,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            instances: 20,
            pool_size: 8,
            features: 3,
            task: TaskKind::BinaryClassification,
            groups: 2,
            max_cost: 5,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Cohort JSON, or a delimited file together with --schema
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Column mapping for a delimited cohort file
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// logistic or mlp [default: logistic]
    #[arg(long)]
    pub kind: Option<String>,
    /// Full-batch epochs [default: 400]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 0.5]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Hidden layer widths for mlp [default: 16,16]
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Embedding width per categorical feature for mlp [default: 4]
    #[arg(long)]
    pub embedding_width: Option<usize>,
    /// cross-entropy or mse [default: by task]
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub cohort: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub kind: PredictorKind,
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub embedding_width: usize,
    pub loss: Option<TrainLoss>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for TrainRun {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainRun {
            cohort: None,
            schema: None,
            kind: PredictorKind::Logistic,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            hidden: t.hidden,
            embedding_width: t.embedding_width,
            loss: None,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct FindWorstArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Predictor JSON, or an `id,score` table ending in .csv
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// Loss as JSON (e.g. '{"type":"top-k","k":10}') or a metric name
    #[arg(long)]
    pub loss: Option<String>,
    /// Within-instance χ² radius ρ₁ [default: the draw size n]
    #[arg(long, allow_hyphen_values = true)]
    pub rho_ind: Option<f64>,
    /// Instance-level χ² radius ρ₂ [default: 6.25]
    #[arg(long, allow_hyphen_values = true)]
    pub rho_xi: Option<f64>,
    /// Frank-Wolfe iterations T [default: 15]
    #[arg(long)]
    pub iters: Option<usize>,
    /// Problems sampled per gradient estimate [default: 35000]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Problems sampled per instance-loss estimate [default: 4000]
    #[arg(long)]
    pub samples2: Option<usize>,
    /// Momentum weight p_t on the fresh gradient [default: 0.7]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Individuals per drawn problem [default: pool size]
    #[arg(long)]
    pub draw_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Feed the negated gradient to the linear step (descends; for comparison)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub literal_sign: Option<bool>,
    /// Step along the DL-weighted gradient estimate, which has lower variance
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub centered: Option<bool>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-iteration objective trace CSV [default: next to --out]
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FindWorstRun {
    pub cohort: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub predictor: Option<PathBuf>,
    pub loss: Option<MetricItem>,
    pub rho_ind: Option<f64>,
    pub rho_xi: f64,
    pub iters: usize,
    pub samples: usize,
    pub samples2: usize,
    pub momentum: f64,
    pub draw_size: Option<usize>,
    pub seed: u64,
    pub literal_sign: bool,
    pub centered: bool,
    pub out: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

impl Default for FindWorstRun {
    fn default() -> Self {
        let p = FwParams::default();
        FindWorstRun {
            cohort: None,
            schema: None,
            predictor: None,
            loss: None,
            rho_ind: None,
            rho_xi: 6.25,
            iters: p.iterations,
            samples: p.num_samples,
            samples2: p.num_samples2,
            momentum: p.momentum,
            draw_size: None,
            seed: 0,
            literal_sign: false,
            centered: false,
            out: None,
            trace: None,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// Worst-case reports; one matrix row each
    #[arg(long = "report", num_args = 1..)]
    pub reports: Option<Vec<PathBuf>>,
    /// Comma-separated metric names [default: the reports' losses]
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
    /// Instances drawn per cell [default: 200]
    #[arg(long)]
    pub instances: Option<usize>,
    /// Problems drawn per sampled instance [default: 4000]
    #[arg(long)]
    pub problems: Option<usize>,
    /// [default: pool size]
    #[arg(long)]
    pub draw_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Raw matrix CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Diagonal-normalized matrix CSV
    #[arg(long)]
    pub normalized: Option<PathBuf>,
    /// SVG heat map of the normalized matrix
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateRun {
    pub cohort: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub predictor: Option<PathBuf>,
    pub reports: Vec<PathBuf>,
    pub metrics: Option<Vec<MetricItem>>,
    pub instances: Option<usize>,
    pub problems: Option<usize>,
    pub draw_size: Option<usize>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub normalized: Option<PathBuf>,
    pub heatmap: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct OracleArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// Loss as JSON or a metric name
    #[arg(long)]
    pub loss: Option<String>,
    /// [default: pool size]
    #[arg(long)]
    pub draw_size: Option<usize>,
    /// [default: the draw size n]
    #[arg(long, allow_hyphen_values = true)]
    pub rho_ind: Option<f64>,
    /// Ascent starting points [default: 20]
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Largest number of multisets to enumerate [default: 100000]
    #[arg(long)]
    pub cap: Option<u64>,
    /// Only this instance [default: all]
    #[arg(long)]
    pub instance: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleRun {
    pub cohort: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub predictor: Option<PathBuf>,
    pub loss: Option<MetricItem>,
    pub draw_size: Option<usize>,
    pub rho_ind: Option<f64>,
    pub restarts: usize,
    pub cap: u64,
    pub instance: Option<String>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for OracleRun {
    fn default() -> Self {
        OracleRun {
            cohort: None,
            schema: None,
            predictor: None,
            loss: None,
            draw_size: None,
            rho_ind: None,
            restarts: crate::oracle::DEFAULT_RESTARTS,
            cap: crate::oracle::DEFAULT_CAP as u64,
            instance: None,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct Fig2Args {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// Comma-separated metric names [default: every metric for the task]
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
    /// Samples per gradient estimate at each point [default: 10,50,250,1000,3000]
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<usize>>,
    /// [default: 0,1,2]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// [default: 8]
    #[arg(long)]
    pub draw_size: Option<usize>,
    /// [default: the draw size n]
    #[arg(long, allow_hyphen_values = true)]
    pub rho_ind: Option<f64>,
    /// [default: 15]
    #[arg(long)]
    pub iters: Option<usize>,
    /// [default: 0.7]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// [default: 20]
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Step along the DL-weighted gradient estimate, which has lower variance
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub centered: Option<bool>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig2Run {
    pub cohort: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub predictor: Option<PathBuf>,
    pub metrics: Option<Vec<MetricItem>>,
    pub grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub draw_size: usize,
    pub rho_ind: Option<f64>,
    pub iters: usize,
    pub momentum: f64,
    pub restarts: usize,
    pub centered: bool,
    pub out: Option<PathBuf>,
}

impl Default for Fig2Run {
    fn default() -> Self {
        Fig2Run {
            cohort: None,
            schema: None,
            predictor: None,
            metrics: None,
            grid: vec![10, 50, 250, 1000, 3000],
            seeds: vec![0, 1, 2],
            draw_size: 8,
            rho_ind: None,
            iters: 15,
            momentum: 0.7,
            restarts: crate::oracle::DEFAULT_RESTARTS,
            centered: false,
            out: None,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct ReportArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Raw matrix CSVs from `evaluate`, one per replicate
    #[arg(long = "matrix", num_args = 1..)]
    pub matrices: Option<Vec<PathBuf>>,
    /// Summary JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// SVG heat map of the mean normalized matrix
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportRun {
    pub matrices: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub heatmap: Option<PathBuf>,
}

/// A metric given by name (resolved with defaults) or as a full spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricItem {
    Spec(LossSpec),
    Name(String),
}

impl MetricItem {
    fn parse_flag(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.starts_with('{') {
            Ok(MetricItem::Spec(serde_json::from_str(t).map_err(|e| Error::config("loss", e.to_string()))?))
        } else {
            Ok(MetricItem::Name(t.to_string()))
        }
    }

    fn resolve(&self, scored: &ScoredCohort, draw_size: usize) -> Result<LossSpec> {
        match self {
            MetricItem::Spec(s) => Ok(s.clone()),
            MetricItem::Name(n) => LossSpec::default_for(n, scored, draw_size),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct OutputHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: Value,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<OutputHash>,
}

/// Settings merged from defaults, an optional config file, and flags.
fn resolve<C: Serialize + DeserializeOwned + Default>(command: &str, config: Option<&Path>, flags: Value) -> Result<C> {
    let Value::Object(mut merged) = serde_json::to_value(C::default())? else {
        unreachable!("settings serialize as objects")
    };
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let Value::Object(mut obj) = value else {
            return Err(Error::config("config", "expected a JSON object"));
        };
        if let (Some(Value::String(cmd)), Some(Value::Object(inner))) = (obj.get("command"), obj.get("config")) {
            if cmd != command {
                return Err(Error::config("config", format!("manifest is for `{cmd}`, not `{command}`")));
            }
            obj = inner.clone();
        }
        merged.extend(obj);
    }
    if let Value::Object(f) = flags {
        merged.extend(f.into_iter().filter(|(_, v)| !v.is_null()));
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::config("config", e.to_string()))
}

fn require<'a, T>(v: &'a Option<T>, field: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::config(field, "is required"))
}

pub fn load_cohort_input(path: &Path, schema: Option<&Path>) -> Result<Cohort> {
    match schema {
        Some(s) => load_cohort(path, &SchemaConfig::from_json_file(s)?),
        None => read_cohort(path),
    }
}

pub fn load_predictor_input(path: &Path, task: TaskKind) -> Result<Predictor> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        Predictor::load_table(path, task)
    } else {
        Predictor::load(path)
    }
}

fn scored_inputs(cohort: &Option<PathBuf>, schema: &Option<PathBuf>, predictor: &Option<PathBuf>) -> Result<ScoredCohort> {
    let c = load_cohort_input(require(cohort, "cohort")?, schema.as_deref())?;
    let p = load_predictor_input(require(predictor, "predictor")?, c.task)?;
    score_cohort(&c, &p)
}

fn write_output(path: &Path, bytes: &[u8], outputs: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::file(path, e))?;
    outputs.push(path.to_path_buf());
    Ok(())
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn flags_value<T: Serialize>(args: &T) -> Result<Value> {
    Ok(serde_json::to_value(args)?)
}

/// What one subcommand produced.
struct Outcome {
    config: Value,
    primary: PathBuf,
    outputs: Vec<PathBuf>,
}

fn run_generate(a: &GenerateArgs) -> Result<Outcome> {
    let cfg: GenerateConfig = resolve("generate", a.common.config.as_deref(), flags_value(a)?)?;
    let out = require(&cfg.out, "out")?.clone();
    let mut spec = SyntheticSpec::new(cfg.instances, cfg.pool_size, cfg.features, cfg.task);
    spec.groups = cfg.groups;
    spec.max_cost = cfg.max_cost;
    let cohort = generate_synthetic(&spec, cfg.seed)?;
    let mut outputs = Vec::new();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    write_cohort(&cohort, &out)?;
    outputs.push(out.clone());
    Ok(Outcome {
        config: serde_json::to_value(&cfg)?,
        primary: out,
        outputs,
    })
}

fn run_train(a: &TrainArgs) -> Result<Outcome> {
    let cfg: TrainRun = resolve("train", a.common.config.as_deref(), flags_value(a)?)?;
    let out = require(&cfg.out, "out")?.clone();
    let cohort = load_cohort_input(require(&cfg.cohort, "cohort")?, cfg.schema.as_deref())?;
    let hyper = TrainConfig {
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        hidden: cfg.hidden.clone(),
        embedding_width: cfg.embedding_width,
        loss: cfg.loss,
        numeric_features: None,
    };
    let trained = train(&cohort, cfg.kind, &hyper, cfg.seed)?;
    let mut outputs = Vec::new();
    write_output(&out, trained.predictor.to_json()?.as_bytes(), &mut outputs)?;
    let last = trained.losses.last().copied().unwrap_or(f64::NAN);
    println!("trained {} predictor; final training loss {last:.6}", trained.predictor.kind_name());
    Ok(Outcome {
        config: serde_json::to_value(&cfg)?,
        primary: out,
        outputs,
    })
}

fn default_rho(explicit: Option<f64>, draw_size: Option<usize>, scored: &ScoredCohort) -> f64 {
    explicit.unwrap_or_else(|| draw_size.unwrap_or_else(|| scored.pools.iter().map(|p| p.len()).max().unwrap_or(1)) as f64)
}

fn run_find_worst(a: &FindWorstArgs) -> Result<Outcome> {
    let mut flags = flags_value(a)?;
    flags["loss"] = match &a.loss {
        Some(s) => serde_json::to_value(MetricItem::parse_flag(s)?)?,
        None => Value::Null,
    };
    let mut cfg: FindWorstRun = resolve("find-worst", a.common.config.as_deref(), flags)?;
    let out = require(&cfg.out, "out")?.clone();
    let scored = scored_inputs(&cfg.cohort, &cfg.schema, &cfg.predictor)?;
    let n = cfg.draw_size.unwrap_or_else(|| scored.pools.iter().map(|p| p.len()).min().unwrap_or(1));
    let spec = require(&cfg.loss, "loss")?.resolve(&scored, n)?;
    cfg.loss = Some(MetricItem::Spec(spec.clone()));
    let rho_ind = default_rho(cfg.rho_ind, cfg.draw_size, &scored);
    cfg.rho_ind = Some(rho_ind);
    let budget = UncertaintyBudget::new(rho_ind, cfg.rho_xi)?;
    let params = FwParams {
        iterations: cfg.iters,
        num_samples: cfg.samples,
        num_samples2: cfg.samples2,
        momentum: cfg.momentum,
        draw_size: cfg.draw_size,
        seed: cfg.seed,
        literal_sign: cfg.literal_sign,
        centered: cfg.centered,
    };
    let report = find_worst_case(&scored, &spec, &budget, &params)?;
    let trace = cfg.trace.clone().unwrap_or_else(|| sidecar(&out, "trace.csv"));
    cfg.trace = Some(trace.clone());
    let mut outputs = Vec::new();
    write_output(&out, report.to_json()?.as_bytes(), &mut outputs)?;
    write_output(&trace, &trace_csv(&report)?, &mut outputs)?;
    println!("worst-case expected {}: {:.6}", spec.name(), report.value);
    Ok(Outcome {
        config: serde_json::to_value(&cfg)?,
        primary: out,
        outputs,
    })
}

fn run_evaluate(a: &EvaluateArgs) -> Result<Outcome> {
    let mut flags = flags_value(a)?;
    flags["metrics"] = match &a.metrics {
        Some(list) => serde_json::to_value(list.iter().map(|s| MetricItem::parse_flag(s)).collect::<Result<Vec<_>>>()?)?,
        None => Value::Null,
    };
    let mut cfg: EvaluateRun = resolve("evaluate", a.common.config.as_deref(), flags)?;
    let out = require(&cfg.out, "out")?.clone();
    if cfg.reports.is_empty() {
        return Err(Error::config("reports", "at least one --report is required"));
    }
    let scored = scored_inputs(&cfg.cohort, &cfg.schema, &cfg.predictor)?;
    let reports = cfg
        .reports
        .iter()
        .map(|p| WorstCaseReport::from_json(&fs::read_to_string(p).map_err(|e| Error::file(p, e))?))
        .collect::<Result<Vec<_>>>()?;
    let n = cfg.draw_size.unwrap_or_else(|| scored.pools.iter().map(|p| p.len()).min().unwrap_or(1));
    let metrics: Vec<LossSpec> = match &cfg.metrics {
        Some(items) => items.iter().map(|m| m.resolve(&scored, n)).collect::<Result<_>>()?,
        None => reports.iter().map(|r| r.loss.clone()).collect(),
    };
    cfg.metrics = Some(metrics.iter().cloned().map(MetricItem::Spec).collect());
    let defaults = EvalParams::default();
    let eval = EvalParams {
        instances: *cfg.instances.get_or_insert(defaults.instances),
        problems: *cfg.problems.get_or_insert(defaults.problems),
        draw_size: cfg.draw_size,
        seed: cfg.seed,
    };
    let matrix = cross_evaluate(&scored, &reports, &metrics, &eval)?;
    let mut outputs = Vec::new();
    write_output(&out, &matrix_csv(&matrix)?, &mut outputs)?;
    let square = matrix.row_metrics == matrix.col_metrics;
    let normalized = if square { Some(diagonal_normalize(&matrix)?) } else { None };
    if let Some(p) = &cfg.normalized {
        let m = normalized
            .as_ref()
            .ok_or_else(|| Error::config("normalized", "rows and columns must list the same metrics"))?;
        write_output(p, &matrix_csv(m)?, &mut outputs)?;
    }
    if let Some(p) = &cfg.heatmap {
        write_output(p, heatmap_svg(normalized.as_ref().unwrap_or(&matrix))?.as_bytes(), &mut outputs)?;
    }
    print_matrix(normalized.as_ref().unwrap_or(&matrix));
    Ok(Outcome {
        config: serde_json::to_value(&cfg)?,
        primary: out,
        outputs,
    })
}

fn print_matrix(m: &CrossMetricMatrix) {
    print!("{:>16}", "");
    for c in &m.col_metrics {
        print!(" {c:>14}");
    }
    println!();
    for (r, row) in m.row_metrics.iter().zip(&m.values) {
        print!("{r:>16}");
        for v in row {
            print!(" {v:>14.4}");
        }
        println!();
    }
}

#[derive(Debug, Serialize)]
struct OracleEntry {
    instance_id: String,
    draw_size: usize,
    multisets: usize,
    q: Vec<f64>,
    /// Maximized `E[DL']`.
    objective: f64,
    /// `E[DL]` at the maximizer.
    expected_dl: f64,
    grid_checked: bool,
}

fn run_oracle(a: &OracleArgs) -> Result<Outcome> {
    let mut flags = flags_value(a)?;
    flags["loss"] = match &a.loss {
        Some(s) => serde_json::to_value(MetricItem::parse_flag(s)?)?,
        None => Value::Null,
    };
    let mut cfg: OracleRun = resolve("oracle", a.common.config.as_deref(), flags)?;
    let out = require(&cfg.out, "out")?.clone();
    let scored = scored_inputs(&cfg.cohort, &cfg.schema, &cfg.predictor)?;
    let pools: Vec<_> = scored
        .pools
        .iter()
        .filter(|p| cfg.instance.as_ref().is_none_or(|id| &p.instance_id == id))
        .collect();
    if pools.is_empty() {
        return Err(Error::Lookup(format!("no instance `{}`", cfg.instance.clone().unwrap_or_default())));
    }
    let n = cfg.draw_size.unwrap_or_else(|| pools.iter().map(|p| p.len()).min().unwrap_or(1));
    let spec = require(&cfg.loss, "loss")?.resolve(&scored, n)?;
    cfg.loss = Some(MetricItem::Spec(spec.clone()));
    let rho = cfg.rho_ind.unwrap_or(n as f64);
    cfg.rho_ind = Some(rho);
    UncertaintyBudget::new(rho, 0.0)?;
    let mut entries = Vec::new();
    for pool in pools {
        let draw = cfg.draw_size.unwrap_or(pool.len());
        spec.validate_for(&scored, draw)?;
        let e = enumerate_problems(pool, &spec, draw, cfg.cap as u128).map_err(|e| Error::Instance {
            instance_id: pool.instance_id.clone(),
            source: Box::new(e),
        })?;
        let best = oracle_maximize(&e, rho, cfg.restarts, cfg.seed)?;
        entries.push(OracleEntry {
            instance_id: pool.instance_id.clone(),
            draw_size: draw,
            multisets: e.multisets.len(),
            expected_dl: exact_expected_dl(&e, &best.q)?,
            q: best.q,
            objective: best.value,
            grid_checked: best.grid_checked,
        });
    }
    let mut outputs = Vec::new();
    write_output(&out, serde_json::to_string_pretty(&entries)?.as_bytes(), &mut outputs)?;
    for e in &entries {
        println!("{}: max E[DL] = {:.6}", e.instance_id, e.expected_dl);
    }
    Ok(Outcome {
        config: serde_json::to_value(&cfg)?,
        primary: out,
        outputs,
    })
}

fn run_fig2(a: &Fig2Args) -> Result<Outcome> {
    let mut flags = flags_value(a)?;
    flags["metrics"] = match &a.metrics {
        Some(list) => serde_json::to_value(list.iter().map(|s| MetricItem::parse_flag(s)).collect::<Result<Vec<_>>>()?)?,
        None => Value::Null,
    };
    let mut cfg: Fig2Run = resolve("fig2", a.common.config.as_deref(), flags)?;
    let out = require(&cfg.out, "out")?.clone();
    let scored = scored_inputs(&cfg.cohort, &cfg.schema, &cfg.predictor)?;
    let metrics: Vec<LossSpec> = match &cfg.metrics {
        Some(items) => items.iter().map(|m| m.resolve(&scored, cfg.draw_size)).collect::<Result<_>>()?,
        None => LossSpec::applicable_defaults(&scored, cfg.draw_size)?,
    };
    cfg.metrics = Some(metrics.iter().cloned().map(MetricItem::Spec).collect());
    let rho = cfg.rho_ind.unwrap_or(cfg.draw_size as f64);
    cfg.rho_ind = Some(rho);
    UncertaintyBudget::new(rho, 0.0)?;
    let params = FwParams {
        iterations: cfg.iters,
        momentum: cfg.momentum,
        draw_size: Some(cfg.draw_size),
        seed: cfg.seeds.first().copied().unwrap_or(0),
        centered: cfg.centered,
        ..FwParams::default()
    };
    let mut points = Vec::new();
    for spec in &metrics {
        let pts = oracle_ratio_curve(&scored, spec, rho, &cfg.grid, &params, &cfg.seeds, cfg.restarts)?;
        for (g, r) in mean_curve(&pts, &cfg.grid) {
            println!("{:<14} samples {g:>6}: mean ratio {r:.4}", spec.name());
        }
        points.extend(pts);
    }
    let mut outputs = Vec::new();
    write_output(&out, &curve_csv(&points)?, &mut outputs)?;
    Ok(Outcome {
        config: serde_json::to_value(&cfg)?,
        primary: out,
        outputs,
    })
}

#[derive(Debug, Serialize)]
struct OffDiagonal {
    row: String,
    col: String,
    normalized: f64,
    half_width: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    replicates: usize,
    normalized_mean: CrossMetricMatrix,
    half_width: Vec<Vec<f64>>,
    off_diagonal: Vec<OffDiagonal>,
}

fn run_report(a: &ReportArgs) -> Result<Outcome> {
    let cfg: ReportRun = resolve("report", a.common.config.as_deref(), flags_value(a)?)?;
    let out = require(&cfg.out, "out")?.clone();
    if cfg.matrices.is_empty() {
        return Err(Error::config("matrices", "at least one --matrix is required"));
    }
    let normalized = cfg
        .matrices
        .iter()
        .map(|p| diagonal_normalize(&read_matrix_csv(p)?))
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate_matrices(&normalized)?;
    let mut off = Vec::new();
    for (r, row) in agg.mean.row_metrics.iter().enumerate() {
        for (c, col) in agg.mean.col_metrics.iter().enumerate() {
            if r != c {
                off.push(OffDiagonal {
                    row: row.clone(),
                    col: col.clone(),
                    normalized: agg.mean.values[r][c],
                    half_width: agg.half_width[r][c],
                });
            }
        }
    }
    let summary = Summary {
        replicates: normalized.len(),
        normalized_mean: agg.mean,
        half_width: agg.half_width,
        off_diagonal: off,
    };
    let mut outputs = Vec::new();
    write_output(&out, serde_json::to_string_pretty(&summary)?.as_bytes(), &mut outputs)?;
    if let Some(p) = &cfg.heatmap {
        write_output(p, heatmap_svg(&summary.normalized_mean)?.as_bytes(), &mut outputs)?;
    }
    print_matrix(&summary.normalized_mean);
    Ok(Outcome {
        config: serde_json::to_value(&cfg)?,
        primary: out,
        outputs,
    })
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Generate(_) => "generate",
        Command::Train(_) => "train",
        Command::FindWorst(_) => "find-worst",
        Command::Evaluate(_) => "evaluate",
        Command::Oracle(_) => "oracle",
        Command::Fig2(_) => "fig2",
        Command::Report(_) => "report",
    }
}

fn common(c: &Command) -> &Common {
    match c {
        Command::Generate(a) => &a.common,
        Command::Train(a) => &a.common,
        Command::FindWorst(a) => &a.common,
        Command::Evaluate(a) => &a.common,
        Command::Oracle(a) => &a.common,
        Command::Fig2(a) => &a.common,
        Command::Report(a) => &a.common,
    }
}

/// Runs a parsed command and writes its manifest.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let start = Instant::now();
    let outcome = match &cli.command {
        Command::Generate(a) => run_generate(a),
        Command::Train(a) => run_train(a),
        Command::FindWorst(a) => run_find_worst(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Oracle(a) => run_oracle(a),
        Command::Fig2(a) => run_fig2(a),
        Command::Report(a) => run_report(a),
    }?;
    let manifest_path = common(&cli.command)
        .manifest
        .clone()
        .unwrap_or_else(|| sidecar(&outcome.primary, "manifest.json"));
    let manifest = Manifest {
        command: command_name(&cli.command).to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: outcome.config,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        outputs: outcome
            .outputs
            .iter()
            .map(|p| Ok(OutputHash {
                path: p.clone(),
                sha256: sha256_file(p)?,
            }))
            .collect::<Result<_>>()?,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text).map_err(|e| Error::file(&manifest_path, e))?;
    Ok(manifest_path)
}

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Config => EXIT_CONFIG,
        ErrorClass::Data => EXIT_DATA,
        ErrorClass::Numerical => EXIT_NUMERICAL,
        ErrorClass::Io => EXIT_IO,
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: invalid configuration field `workers`: must be at least 1");
            return EXIT_CONFIG;
        }
        // fails only if a pool already exists, which cannot happen in the binary
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(&cli) {
        Ok(manifest) => {
            println!("manifest: {}", manifest.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            exit_code(&e)
        }
    }
}
