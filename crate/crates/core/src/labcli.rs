//! Command-line front end: config parsing, experiment dispatch, atomic
//! artifact emission and report bundles.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::benchmarks;
use crate::bounds::{hard_first_sweep, median_margin, normalized_ensemble, BoundInputs, BoundReport, Convention};
use crate::datagen::{apply_feature_noise, apply_label_noise, format_f64, gen_gaussian_mixture, Dataset, DatasetSpec, NoiseKind, NoiseSpec};
use crate::difficulty::{estimate_error_profile, read_profile_csv, DifficultyProfile, ErrorEstimatorConfig, EstimatorMode};
use crate::error::LabError;
use crate::maxmargin::solve_max_margin;
use crate::models::{LossSpec, ModelFamily};
use crate::optimizer::{normalized_margin, train, Hyper, WeightScheme};
use crate::propcheck::{
    check_dual_weights, check_feature_noise, check_imbalance, check_label_noise, check_margin_convergence,
    check_margin_error, class_recall, write_summary_csv, write_verdicts_jsonl, AccelerationRun, CheckVerdict,
    DualModel, FeatureNoiseCheck, ImbalanceCheck, LabelNoiseCheck, MarginConvergenceCheck, MarginErrorCheck,
};
use crate::seed::{config_digest, derive_seed, sha256_hex};
use crate::SCHEMA_VERSION;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Gen,
    Train,
    Difficulty,
    Bound,
    Check,
    Report,
}

#[derive(Debug, Parser)]
#[command(name = "lab", version, about = "Per-sample difficulty experiments")]
pub struct Cli {
    #[arg(value_enum)]
    pub experiment: Experiment,
    /// JSON experiment config.
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Errors split by exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(LabError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    /// Machine-readable record written to stderr.
    pub fn record(&self) -> Value {
        match self {
            CliError::Usage(msg) => json!({"error": "usage", "message": msg, "exit_code": EXIT_USAGE}),
            CliError::Runtime(e) => json!({"error": e.kind(), "message": e.to_string(), "exit_code": EXIT_RUNTIME}),
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkName {
    Standard,
    SeparableLinear,
    Imbalanced,
    TwoPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// A Gaussian-mixture spec, given inline.
    Spec { spec: DatasetSpec },
    /// A named benchmark; `seed` defaults to the master seed.
    Benchmark {
        name: BenchmarkName,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        /// Large-class size for the imbalanced benchmark.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        large: Option<usize>,
        /// Imbalance ratio for the imbalanced benchmark.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ratio: Option<f64>,
    },
    /// A dataset CSV; relative paths resolve against the config file.
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSettings {
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_mode")]
    pub mode: EstimatorMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

fn default_folds() -> usize {
    5
}

fn default_repeats() -> usize {
    20
}

fn default_mode() -> EstimatorMode {
    EstimatorMode::Kfold
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        EstimatorSettings {
            folds: default_folds(),
            repeats: default_repeats(),
            mode: default_mode(),
            delta: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSettings {
    /// Held-out set for the empirical test error.
    pub test: DatasetSource,
    #[serde(default = "default_models")]
    pub models: usize,
    /// Absolute margin threshold; defaults to `gamma_fraction` times the
    /// median normalized training margin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default = "default_gamma_fraction")]
    pub gamma_fraction: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_q")]
    pub q: u32,
    /// Feature-norm bound; defaults to the largest row norm over both sets.
    #[serde(default, rename = "L", skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
    #[serde(default)]
    pub convention: Convention,
    /// Hard-first exponents `β` of the weight sweep.
    #[serde(default = "default_powers")]
    pub powers: Vec<f64>,
}

fn default_models() -> usize {
    5
}

fn default_gamma_fraction() -> f64 {
    0.1
}

fn default_delta() -> f64 {
    0.1
}

fn default_q() -> u32 {
    2
}

fn default_powers() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
}

/// One entry of the `checks` list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckSpec {
    FeatureNoise {
        #[serde(default = "default_feature_rate")]
        rate: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        epsilon: Option<f64>,
    },
    LabelNoise {
        rate: f64,
        #[serde(default = "default_label_kind")]
        kind: NoiseKind,
        #[serde(default = "default_resamples")]
        bootstrap_resamples: usize,
        #[serde(default = "default_subset")]
        enumeration_subset: usize,
        #[serde(default = "default_draws")]
        sampled_draws: usize,
    },
    Imbalance {
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
    },
    MarginError {
        #[serde(default = "default_match_tol")]
        variance_match_rel_tol: f64,
    },
    /// Compares the margin samples of profile rows `i` and `j`.
    DualWeights { i: usize, j: usize, model: DualModel },
    MarginConvergence {
        schemes: Vec<WeightScheme>,
        lambdas: Vec<f64>,
        #[serde(default = "default_grad_tol")]
        grad_tol: f64,
        #[serde(default = "default_max_iters")]
        max_iters: usize,
        #[serde(default = "default_step")]
        initial_step: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        acceleration: Option<AccelerationRun>,
    },
}

fn default_feature_rate() -> f64 {
    0.1
}

fn default_label_kind() -> NoiseKind {
    NoiseKind::FlipLabel
}

fn default_resamples() -> usize {
    2000
}

fn default_subset() -> usize {
    10
}

fn default_draws() -> usize {
    20_000
}

fn default_test_per_class() -> usize {
    100
}

fn default_match_tol() -> f64 {
    0.1
}

fn default_grad_tol() -> f64 {
    1e-9
}

fn default_max_iters() -> usize {
    200_000
}

fn default_step() -> f64 {
    0.1
}

/// A single JSON document describing one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    /// Master seed; every random draw derives from it.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<ModelFamily>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyper: Option<Hyper>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<WeightScheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<EstimatorSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundSettings>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CheckSpec>,
    /// Artifact directories read by `report`; defaults to the output directory.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| usage(format!("invalid config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(usage(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    /// Makes relative paths in the config relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for src in [self.dataset.as_mut(), self.bound.as_mut().map(|b| &mut b.test)].into_iter().flatten() {
            if let DatasetSource::Csv { path } = src {
                fix(path);
            }
        }
        self.inputs.iter_mut().for_each(fix);
        if let Some(p) = self.out_dir.as_mut() {
            fix(p);
        }
    }

    fn family(&self) -> ModelFamily {
        self.family.clone().unwrap_or_else(ModelFamily::linear)
    }

    fn loss(&self) -> LossSpec {
        self.loss.unwrap_or(LossSpec::new(crate::models::LossKind::Logistic))
    }

    fn hyper(&self) -> Hyper {
        self.hyper.clone().unwrap_or_else(|| Hyper::new(300))
    }

    pub fn estimator_config(&self) -> ErrorEstimatorConfig {
        let s = self.estimator.clone().unwrap_or_default();
        let mut cfg = ErrorEstimatorConfig::new(self.family(), self.loss(), self.hyper(), self.seed);
        cfg.folds = s.folds;
        cfg.repeats = s.repeats;
        cfg.mode = s.mode;
        cfg.delta = s.delta;
        cfg
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self, experiment: Experiment) -> CliResult<()> {
        let bad = |e: LabError| usage(e.to_string());
        let needs_data = experiment != Experiment::Report;
        if needs_data {
            match &self.dataset {
                None => return Err(usage("config has no dataset")),
                Some(src) => validate_source(src)?,
            }
        }
        if let Some(n) = &self.noise {
            n.validate().map_err(bad)?;
        }
        self.loss().validate().map_err(bad)?;
        self.hyper().validate().map_err(bad)?;
        if let Some(s) = &self.scheme {
            s.validate().map_err(bad)?;
        }
        if matches!(experiment, Experiment::Difficulty | Experiment::Bound | Experiment::Check)
            || self.scheme.as_ref().is_some_and(WeightScheme::needs_errors)
        {
            self.estimator_config().validate().map_err(bad)?;
        }
        match experiment {
            Experiment::Bound => {
                let b = self.bound.as_ref().ok_or_else(|| usage("bound run needs a `bound` section"))?;
                validate_source(&b.test)?;
                if b.powers.is_empty() {
                    return Err(usage("bound.powers is empty"));
                }
            }
            Experiment::Check if self.checks.is_empty() => return Err(usage("check run needs a non-empty `checks` list")),
            Experiment::Report => {
                for p in &self.inputs {
                    if !p.is_dir() {
                        return Err(usage(format!("input directory {} does not exist", p.display())));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn validate_source(src: &DatasetSource) -> CliResult<()> {
    match src {
        DatasetSource::Csv { path } if !path.is_file() => {
            Err(usage(format!("dataset path {} does not exist", path.display())))
        }
        DatasetSource::Spec { spec } => spec.validate().map_err(|e| usage(e.to_string())),
        _ => Ok(()),
    }
}

/// The generating spec of a source, when it has one.
fn source_spec(src: &DatasetSource, master: u64) -> Option<DatasetSpec> {
    match src {
        DatasetSource::Spec { spec } => Some(spec.clone()),
        DatasetSource::Benchmark { name, seed, large, ratio } => {
            let seed = seed.unwrap_or(master);
            match name {
                BenchmarkName::Standard => Some(benchmarks::standard_binary_spec(seed)),
                BenchmarkName::SeparableLinear => Some(benchmarks::separable_linear_spec(seed)),
                BenchmarkName::Imbalanced => {
                    Some(benchmarks::imbalanced_spec(seed, large.unwrap_or(100), ratio.unwrap_or(10.0)))
                }
                BenchmarkName::TwoPoint => None,
            }
        }
        DatasetSource::Csv { .. } => None,
    }
}

pub fn load_source(src: &DatasetSource, master: u64) -> crate::error::Result<Dataset> {
    match src {
        DatasetSource::Spec { spec } => gen_gaussian_mixture(spec),
        DatasetSource::Benchmark { name, seed, .. } => match name {
            BenchmarkName::TwoPoint => Ok(benchmarks::two_point()),
            BenchmarkName::SeparableLinear => benchmarks::separable_linear(seed.unwrap_or(master)),
            _ => gen_gaussian_mixture(&source_spec(src, master).expect("spec-backed benchmark")),
        },
        DatasetSource::Csv { path } => Dataset::read_csv(fs::File::open(path)?),
    }
}

/// A named output held in memory until the run succeeds.
#[derive(Clone, Debug)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    fn new(name: &str, bytes: Vec<u8>) -> Self {
        Artifact { name: name.into(), bytes }
    }

    fn json<T: Serialize>(name: &str, value: &T) -> crate::error::Result<Self> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        Ok(Artifact::new(name, bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    pub schema_version: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub experiment: Experiment,
    pub config_digest: String,
    pub tool_version: String,
    pub master_seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub artifacts: Vec<ArtifactEntry>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Writes `bytes` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, dir.join(name))
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> crate::error::Result<()>) -> crate::error::Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Dataset of the run, with configured noise applied. Feature noise needs a
/// reference gradient, taken from a profile of the clean data.
fn prepared_dataset(cfg: &ExperimentConfig) -> crate::error::Result<Dataset> {
    let src = cfg.dataset.as_ref().ok_or_else(|| LabError::invalid("config has no dataset"))?;
    let ds = load_source(src, cfg.seed)?;
    match &cfg.noise {
        None => Ok(ds),
        Some(n) if n.kind == NoiseKind::Feature => {
            let profile = estimate_error_profile(&ds, &cfg.estimator_config())?;
            Ok(apply_feature_noise(&ds, n, &profile.reference_gradient)?.dataset)
        }
        Some(n) => apply_label_noise(&ds, n),
    }
}

fn run_gen(cfg: &ExperimentConfig) -> crate::error::Result<Vec<Artifact>> {
    let ds = prepared_dataset(cfg)?;
    let meta = json!({
        "schema_version": SCHEMA_VERSION,
        "n": ds.n(),
        "dim": ds.dim(),
        "num_classes": ds.num_classes,
        "class_counts": ds.class_counts(),
        "noisy": ds.noise_flag.iter().filter(|f| **f).count(),
    });
    Ok(vec![
        Artifact::new("dataset.csv", csv_bytes(|b| ds.write_csv(b))?),
        Artifact::json("dataset_meta.json", &meta)?,
    ])
}

fn profile_artifacts(profile: &DifficultyProfile) -> crate::error::Result<Vec<Artifact>> {
    let meta = json!({"schema_version": SCHEMA_VERSION, "meta": profile.meta});
    Ok(vec![
        Artifact::new("profile.csv", csv_bytes(|b| profile.write_csv(b))?),
        Artifact::json("profile_meta.json", &meta)?,
    ])
}

fn run_difficulty(cfg: &ExperimentConfig) -> crate::error::Result<Vec<Artifact>> {
    let ds = prepared_dataset(cfg)?;
    let profile = estimate_error_profile(&ds, &cfg.estimator_config())?;
    profile_artifacts(&profile)
}

fn run_train(cfg: &ExperimentConfig) -> crate::error::Result<Vec<Artifact>> {
    let ds = prepared_dataset(cfg)?;
    let scheme = cfg.scheme.clone().unwrap_or_else(WeightScheme::equal);
    let mut artifacts = Vec::new();
    let errors = if scheme.needs_errors() {
        let profile = estimate_error_profile(&ds, &cfg.estimator_config())?;
        artifacts.extend(profile_artifacts(&profile)?);
        Some(profile.err)
    } else {
        None
    };
    let family = cfg.family();
    let reference = if family.kind == crate::models::ModelKind::Linear && ds.is_binary() {
        match solve_max_margin(&ds) {
            Ok(sol) => Some(sol.direction),
            Err(LabError::NotSeparable) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let init = family.init(&ds, derive_seed(cfg.seed, &[0x1417]))?;
    let (model, trace) = train(&init, &ds, &scheme, &cfg.loss(), &cfg.hyper(), reference.as_deref(), errors.as_deref())?;
    let recall: Vec<f64> = (0..ds.num_classes).map(|k| class_recall(&model, &ds, k)).collect::<crate::error::Result<_>>()?;
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "scheme": scheme.kind,
        "dynamic": scheme.dynamic,
        "epochs": trace.records.last().map(|r| r.epoch),
        "final_normalized_margin": normalized_margin(&model, &ds).ok(),
        "final_cosine": trace.records.last().and_then(|r| r.cosine_ref),
        "epochs_to_cosine_0.99": trace.epochs_to_cosine(0.99),
        "class_recall": recall,
    });
    let mut ckpt = model.checkpoint_json()?.into_bytes();
    ckpt.push(b'\n');
    artifacts.push(Artifact::new("trace.csv", csv_bytes(|b| trace.write_csv(b))?));
    artifacts.push(Artifact::new("model.json", ckpt));
    artifacts.push(Artifact::json("train_summary.json", &summary)?);
    Ok(artifacts)
}

fn run_bound(cfg: &ExperimentConfig) -> crate::error::Result<Vec<Artifact>> {
    let b = cfg.bound.as_ref().ok_or_else(|| LabError::invalid("missing bound section"))?;
    let ds = prepared_dataset(cfg)?;
    let test = load_source(&b.test, derive_seed(cfg.seed, &[0x7e57]))?;
    let profile = estimate_error_profile(&ds, &cfg.estimator_config())?;
    let models = normalized_ensemble(&cfg.family(), &cfg.loss(), &cfg.hyper(), &ds, b.models, derive_seed(cfg.seed, &[0xb0]))?;
    let gamma = match b.gamma {
        Some(g) => g,
        None => b.gamma_fraction * median_margin(&models, &ds)?,
    };
    let inputs = BoundInputs {
        gamma,
        delta: b.delta,
        q: b.q,
        l: b.l.unwrap_or_else(|| ds.max_row_norm().max(test.max_row_norm())),
        n: ds.n(),
    };
    let reports = hard_first_sweep(&models, &ds, &test, &profile.err, &b.powers, &inputs, b.convention)?;
    Ok(vec![
        Artifact::new("bound.csv", csv_bytes(|buf| write_bound_csv(&b.powers, &reports, buf))?),
        Artifact::json("bound.json", &json!({"schema_version": SCHEMA_VERSION, "powers": b.powers, "reports": reports}))?,
    ])
}

pub fn write_bound_csv<W: Write>(powers: &[f64], reports: &[BoundReport], writer: W) -> crate::error::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["power", "gamma", "D", "I", "II", "III", "total", "empirical"])?;
    for (p, r) in powers.iter().zip(reports) {
        w.write_record(
            [*p, r.gamma, r.d, r.term_i, r.term_ii, r.term_iii, r.total, r.empirical].map(format_f64),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every configured check, in order.
pub fn run_checks(cfg: &ExperimentConfig) -> crate::error::Result<Vec<CheckVerdict>> {
    let src = cfg.dataset.as_ref().ok_or_else(|| LabError::invalid("config has no dataset"))?;
    let clean = load_source(src, cfg.seed)?;
    let ds = prepared_dataset(cfg)?;
    let est = cfg.estimator_config();
    let mut profile: Option<DifficultyProfile> = None;
    let mut verdicts = Vec::with_capacity(cfg.checks.len());
    for (k, check) in cfg.checks.iter().enumerate() {
        let check_seed = derive_seed(cfg.seed, &[0xc4ec, k as u64]);
        let verdict = match check {
            CheckSpec::FeatureNoise { rate, epsilon } => check_feature_noise(
                &ds,
                &FeatureNoiseCheck {
                    estimator: est.clone(),
                    rate: *rate,
                    epsilon: *epsilon,
                    noise_seed: check_seed,
                },
            )?,
            CheckSpec::LabelNoise {
                rate,
                kind,
                bootstrap_resamples,
                enumeration_subset,
                sampled_draws,
            } => check_label_noise(
                &clean,
                &LabelNoiseCheck {
                    rate: *rate,
                    kind: *kind,
                    noise_seed: check_seed,
                    estimator: est.clone(),
                    bootstrap_resamples: *bootstrap_resamples,
                    enumeration_subset: *enumeration_subset,
                    sampled_draws: *sampled_draws,
                },
            )?,
            CheckSpec::Imbalance { test_per_class } => {
                let spec = source_spec(src, cfg.seed)
                    .ok_or_else(|| LabError::invalid("imbalance check needs a generated dataset"))?;
                check_imbalance(
                    &spec,
                    &ImbalanceCheck {
                        estimator: est.clone(),
                        test_seed: check_seed,
                        test_per_class: *test_per_class,
                    },
                )?
            }
            CheckSpec::MarginError { variance_match_rel_tol } => {
                let p = cached_profile(&mut profile, &ds, &est)?;
                check_margin_error(
                    p,
                    &MarginErrorCheck {
                        variance_match_rel_tol: *variance_match_rel_tol,
                    },
                )?
            }
            CheckSpec::DualWeights { i, j, model } => {
                let p = cached_profile(&mut profile, &ds, &est)?;
                if *i >= p.n() || *j >= p.n() {
                    return Err(LabError::invalid("dual_weights index out of range"));
                }
                check_dual_weights(&p.margin_samples[*i], &p.margin_samples[*j], *model)?
            }
            CheckSpec::MarginConvergence {
                schemes,
                lambdas,
                grad_tol,
                max_iters,
                initial_step,
                acceleration,
            } => {
                let errors = if schemes.iter().any(WeightScheme::needs_errors) {
                    Some(cached_profile(&mut profile, &ds, &est)?.err.clone())
                } else {
                    None
                };
                check_margin_convergence(
                    &ds,
                    &MarginConvergenceCheck {
                        family: cfg.family(),
                        loss: cfg.loss().kind,
                        schemes: schemes.clone(),
                        lambdas: lambdas.clone(),
                        errors,
                        grad_tol: *grad_tol,
                        max_iters: *max_iters,
                        initial_step: *initial_step,
                        seed: check_seed,
                        acceleration: acceleration.clone(),
                    },
                )?
            }
        };
        info!("{}: {:?}", verdict.check_id, verdict.outcome);
        verdicts.push(verdict);
    }
    Ok(verdicts)
}

fn cached_profile<'a>(
    slot: &'a mut Option<DifficultyProfile>,
    ds: &Dataset,
    est: &ErrorEstimatorConfig,
) -> crate::error::Result<&'a DifficultyProfile> {
    if slot.is_none() {
        *slot = Some(estimate_error_profile(ds, est)?);
    }
    Ok(slot.as_ref().expect("profile just computed"))
}

fn run_check(cfg: &ExperimentConfig) -> crate::error::Result<Vec<Artifact>> {
    let verdicts = run_checks(cfg)?;
    Ok(vec![
        Artifact::new("verdicts.jsonl", csv_bytes(|b| write_verdicts_jsonl(&verdicts, b))?),
        Artifact::new("check_summary.csv", csv_bytes(|b| write_summary_csv(&verdicts, b))?),
    ])
}

/// Artifacts found in one input directory.
#[derive(Default)]
struct Inputs {
    profiles: Vec<(String, Vec<crate::difficulty::ProfileRow>)>,
    traces: Vec<(String, Vec<TraceRow>)>,
    train_summaries: Vec<(String, Value)>,
    bounds: Vec<(String, Value)>,
    verdicts: Vec<(String, Value)>,
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    epoch: usize,
    normalized_margin: f64,
    #[serde(default)]
    cosine_ref: Option<f64>,
}

fn rt<E: std::fmt::Display>(ctx: &str) -> impl FnOnce(E) -> LabError + '_ {
    move |e| LabError::Report(format!("{ctx}: {e}"))
}

fn gather(dirs: &[PathBuf]) -> crate::error::Result<Inputs> {
    let mut manifests = Vec::new();
    for dir in dirs {
        let path = dir.join(MANIFEST_FILE);
        if path.is_file() {
            let text = fs::read_to_string(&path)?;
            let m: Value = serde_json::from_str(&text).map_err(rt(&path.display().to_string()))?;
            manifests.push((dir.clone(), m));
        }
    }
    let offenders: Vec<String> = manifests
        .iter()
        .filter(|(_, m)| m["schema_version"].as_u64() != Some(u64::from(SCHEMA_VERSION)))
        .map(|(d, m)| format!("{} (schema_version {})", d.display(), m["schema_version"]))
        .collect();
    if !offenders.is_empty() {
        return Err(LabError::Report(format!(
            "incompatible schema versions (expected {SCHEMA_VERSION}): {}",
            offenders.join(", ")
        )));
    }
    let mut inputs = Inputs::default();
    for (dir, m) in &manifests {
        let tag = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
        for a in m["artifacts"].as_array().into_iter().flatten() {
            let Some(name) = a["path"].as_str() else { continue };
            let path = dir.join(name);
            let ctx = path.display().to_string();
            match name {
                "profile.csv" => inputs.profiles.push((tag.clone(), read_profile_csv(fs::File::open(&path)?)?)),
                "trace.csv" => {
                    let mut r = csv::Reader::from_path(&path)?;
                    let rows = r.deserialize().collect::<std::result::Result<Vec<TraceRow>, _>>()?;
                    inputs.traces.push((tag.clone(), rows));
                }
                "train_summary.json" | "bound.json" => {
                    let v: Value = serde_json::from_str(&fs::read_to_string(&path)?).map_err(rt(&ctx))?;
                    let list = if name == "bound.json" { &mut inputs.bounds } else { &mut inputs.train_summaries };
                    list.push((tag.clone(), v));
                }
                "verdicts.jsonl" => {
                    for line in fs::read_to_string(&path)?.lines().filter(|l| !l.trim().is_empty()) {
                        inputs.verdicts.push((tag.clone(), serde_json::from_str(line).map_err(rt(&ctx))?));
                    }
                }
                _ => {}
            }
        }
    }
    Ok(inputs)
}

const HIST_BINS: usize = 20;

fn run_report(cfg: &ExperimentConfig, out: &Path) -> crate::error::Result<Vec<Artifact>> {
    let dirs = if cfg.inputs.is_empty() { vec![out.to_path_buf()] } else { cfg.inputs.clone() };
    let inputs = gather(&dirs)?;
    let empty = inputs.profiles.is_empty()
        && inputs.traces.is_empty()
        && inputs.train_summaries.is_empty()
        && inputs.bounds.is_empty()
        && inputs.verdicts.is_empty();
    if empty {
        let summary = json!({"schema_version": SCHEMA_VERSION, "no_inputs": true});
        return Ok(vec![Artifact::json("summary.json", &summary)?]);
    }
    let mut artifacts = Vec::new();
    let mut summary = BTreeMap::<String, Value>::new();
    summary.insert("schema_version".into(), json!(SCHEMA_VERSION));
    summary.insert("no_inputs".into(), json!(false));

    if !inputs.profiles.is_empty() {
        let mut hist = csv::Writer::from_writer(Vec::new());
        hist.write_record(["run", "noise_flag", "bin_low", "bin_high", "count"])?;
        let mut class = csv::Writer::from_writer(Vec::new());
        class.write_record(["run", "class", "count", "mean_err", "std_err"])?;
        let mut scatter = csv::Writer::from_writer(Vec::new());
        scatter.write_record(["run", "idx", "mu_hat", "sigma2_hat", "uncertainty", "err"])?;
        let mut profile_stats = Vec::new();
        for (run, rows) in &inputs.profiles {
            let max = rows.iter().map(|r| r.err).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
            for flag in [false, true] {
                let mut counts = [0usize; HIST_BINS];
                for r in rows.iter().filter(|r| r.noise_flag == u8::from(flag)) {
                    let b = ((r.err / max) * HIST_BINS as f64).floor() as usize;
                    counts[b.min(HIST_BINS - 1)] += 1;
                }
                for (b, c) in counts.iter().enumerate() {
                    let lo = max * b as f64 / HIST_BINS as f64;
                    let hi = max * (b + 1) as f64 / HIST_BINS as f64;
                    hist.write_record([run.clone(), u8::from(flag).to_string(), format_f64(lo), format_f64(hi), c.to_string()])?;
                }
            }
            let classes = rows.iter().map(|r| r.class).max().map_or(0, |m| m + 1);
            for k in 0..classes {
                let e: Vec<f64> = rows.iter().filter(|r| r.class == k).map(|r| r.err).collect();
                class.write_record([
                    run.clone(),
                    k.to_string(),
                    e.len().to_string(),
                    format_f64(crate::stats::mean(&e)),
                    format_f64(crate::stats::variance(&e).sqrt()),
                ])?;
            }
            for (i, r) in rows.iter().enumerate() {
                scatter.write_record([
                    run.clone(),
                    i.to_string(),
                    format_f64(r.mu_hat),
                    format_f64(r.sigma2_hat),
                    format_f64(r.uncertainty),
                    format_f64(r.err),
                ])?;
            }
            let mu: Vec<f64> = rows.iter().map(|r| r.mu_hat).collect();
            let err: Vec<f64> = rows.iter().map(|r| r.err).collect();
            let gaussian = rows.iter().filter(|r| r.z_skew.abs() <= 1.96 && r.z_kurt.abs() <= 1.96).count();
            profile_stats.push(json!({
                "run": run,
                "n": rows.len(),
                "mean_err": crate::stats::mean(&err),
                "spearman_mu_err": crate::stats::spearman(&mu, &err),
                "gaussian_fraction": gaussian as f64 / rows.len().max(1) as f64,
            }));
        }
        artifacts.push(Artifact::new("error_histogram.csv", hist.into_inner().map_err(rt("csv"))?));
        artifacts.push(Artifact::new("class_errors.csv", class.into_inner().map_err(rt("csv"))?));
        artifacts.push(Artifact::new("margin_error_scatter.csv", scatter.into_inner().map_err(rt("csv"))?));
        summary.insert("profiles".into(), Value::Array(profile_stats));
    }
    for (k, (run, rows)) in inputs.traces.iter().enumerate() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "normalized_margin", "cosine_ref"])?;
        for r in rows {
            w.write_record([
                r.epoch.to_string(),
                format_f64(r.normalized_margin),
                r.cosine_ref.map(format_f64).unwrap_or_default(),
            ])?;
        }
        artifacts.push(Artifact::new(&format!("curve_{k:02}_{run}.csv"), w.into_inner().map_err(rt("csv"))?));
    }
    if !inputs.train_summaries.is_empty() {
        let mut margins = csv::Writer::from_writer(Vec::new());
        margins.write_record(["run", "scheme", "dynamic", "final_normalized_margin", "epochs_to_cosine_0.99"])?;
        let mut recall = csv::Writer::from_writer(Vec::new());
        recall.write_record(["run", "scheme", "class", "recall"])?;
        for (run, s) in &inputs.train_summaries {
            let scheme = s["scheme"].as_str().unwrap_or("").to_string();
            margins.write_record([
                run.clone(),
                scheme.clone(),
                s["dynamic"].to_string(),
                json_num(&s["final_normalized_margin"]),
                json_num(&s["epochs_to_cosine_0.99"]),
            ])?;
            for (k, r) in s["class_recall"].as_array().into_iter().flatten().enumerate() {
                recall.write_record([run.clone(), scheme.clone(), k.to_string(), json_num(r)])?;
            }
        }
        artifacts.push(Artifact::new("scheme_margins.csv", margins.into_inner().map_err(rt("csv"))?));
        artifacts.push(Artifact::new("class_recall.csv", recall.into_inner().map_err(rt("csv"))?));
    }
    if !inputs.bounds.is_empty() {
        summary.insert(
            "bounds".into(),
            Value::Array(inputs.bounds.iter().map(|(run, v)| json!({"run": run, "reports": v["reports"]})).collect()),
        );
    }
    if !inputs.verdicts.is_empty() {
        let mut by_id = serde_json::Map::new();
        for (run, v) in &inputs.verdicts {
            let id = v["check_id"].as_str().unwrap_or("unknown");
            by_id.insert(format!("{run}/{id}"), json!({"outcome": v["outcome"], "statistics": v["statistics"]}));
        }
        summary.insert("checks".into(), Value::Object(by_id));
    }
    artifacts.push(Artifact::json("summary.json", &summary)?);
    Ok(artifacts)
}

fn json_num(v: &Value) -> String {
    v.as_f64().map(format_f64).unwrap_or_default()
}

/// Runs one experiment and writes its artifacts and manifest into `out`.
/// Nothing is written unless the whole pipeline succeeds.
pub fn run(experiment: Experiment, cfg: &ExperimentConfig, out: &Path) -> CliResult<RunManifest> {
    cfg.validate(experiment)?;
    let started = now_ms();
    info!("running {experiment:?} into {}", out.display());
    let artifacts = match experiment {
        Experiment::Gen => run_gen(cfg),
        Experiment::Train => run_train(cfg),
        Experiment::Difficulty => run_difficulty(cfg),
        Experiment::Bound => run_bound(cfg),
        Experiment::Check => run_check(cfg),
        Experiment::Report => run_report(cfg, out),
    }?;
    fs::create_dir_all(out).map_err(LabError::from)?;
    let mut entries = Vec::with_capacity(artifacts.len());
    for a in &artifacts {
        write_atomic(out, &a.name, &a.bytes).map_err(LabError::from)?;
        entries.push(ArtifactEntry {
            path: a.name.clone(),
            sha256: sha256_hex(&a.bytes),
            bytes: a.bytes.len() as u64,
            schema_version: SCHEMA_VERSION,
        });
    }
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        experiment,
        config_digest: config_digest(cfg)?,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: cfg.seed,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        artifacts: entries,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(LabError::from)?;
    bytes.push(b'\n');
    write_atomic(out, MANIFEST_FILE, &bytes).map_err(LabError::from)?;
    Ok(manifest)
}

/// Entry point of the `lab` binary; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("LAB_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let _ = e.print();
            return report_error(&usage(e.kind().to_string()));
        }
    };
    match execute(&cli) {
        Ok(manifest) => {
            println!("{}", serde_json::to_string(&manifest).unwrap_or_default());
            0
        }
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &CliError) -> i32 {
    eprintln!("{}", e.record());
    e.exit_code()
}

fn execute(cli: &Cli) -> CliResult<RunManifest> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(j).build_global().is_err() {
            warn!("thread pool already initialized; --jobs ignored");
        }
    }
    let cfg = ExperimentConfig::load(&cli.config)?;
    let out = cli.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    run(cli.experiment, &cfg, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(text).unwrap()
    }

    #[test]
    fn seed_is_required() {
        assert!(matches!(ExperimentConfig::from_json("{}"), Err(CliError::Usage(_))));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"seed": 1, "sed": 2}"#).is_err());
    }

    #[test]
    fn missing_csv_is_a_usage_error() {
        let c = cfg(r#"{"seed": 1, "dataset": {"source": "csv", "path": "/nonexistent/x.csv"}}"#);
        assert!(matches!(c.validate(Experiment::Gen), Err(CliError::Usage(_))));
    }

    #[test]
    fn benchmark_sources_load() {
        let c = cfg(r#"{"seed": 3, "dataset": {"source": "benchmark", "name": "imbalanced"}}"#);
        let ds = load_source(c.dataset.as_ref().unwrap(), c.seed).unwrap();
        assert_eq!(ds.class_counts(), vec![100, 10]);
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        write_atomic(dir.path(), "a.txt", b"hello").unwrap();
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("a.txt")]);
    }
}
