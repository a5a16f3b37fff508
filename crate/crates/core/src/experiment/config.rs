use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agop::{agop, alignment};
use crate::data::{self, egop_oracle, Dataset, Provenance, TargetFunction, DEFAULT_EGOP_SAMPLES};
use crate::error::{Error, Result};
use crate::kernel::{critical_lr_hessian, critical_lr_ntk, ntk_matrix};
use crate::linalg::DenseMatrix;
use crate::network::{Mlp, MlpConfig};
use crate::rng::{derive_seed, fnv1a};
use crate::trainer::{
    detect_catapult_events, train_annotated, Horizon, InstrumentConfig, OptimizerSpec, RunLog, StopConfig,
    TerminalStatus, DEFAULT_EVENT_EPSILON,
};

/// Environment variable that relocates every output directory under a common root.
pub const OUTPUT_ROOT_ENV: &str = "CATAPULT_OUT";

fn two() -> f64 {
    2.0
}

/// Where the rows come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        target: TargetFunction,
        n: usize,
        d: usize,
        #[serde(default)]
        noise_sigma: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Unit-sphere points labelled 1, with one point and its label scaled.
    Sphere {
        n: usize,
        d: usize,
        #[serde(default = "two")]
        scale: f64,
        #[serde(default)]
        target_index: usize,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// Without a split every row trains.
    #[serde(default)]
    pub split: Option<SplitSizes>,
}

impl DataConfig {
    pub fn synthetic(target: TargetFunction, n: usize, d: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            source: DataSource::Synthetic {
                target,
                n,
                d,
                noise_sigma,
                seed,
            },
            split: None,
        }
    }

    pub fn with_split(mut self, split: SplitSizes) -> Self {
        self.split = Some(split);
        self
    }

    /// Input dimension, when it is known without reading a file.
    pub fn declared_dim(&self) -> Option<usize> {
        match &self.source {
            DataSource::Synthetic { d, .. } | DataSource::Sphere { d, .. } => Some(*d),
            DataSource::Csv { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.source {
            DataSource::Synthetic {
                target, n, d, noise_sigma, ..
            } => {
                target
                    .check_dim(*d)
                    .map_err(|e| Error::config("dataset.source.d", e.to_string()))?;
                if *n == 0 {
                    return Err(Error::config("dataset.source.n", "must be >= 1"));
                }
                if !(*noise_sigma >= 0.0 && noise_sigma.is_finite()) {
                    return Err(Error::config("dataset.source.noise_sigma", "must be finite and >= 0"));
                }
            }
            DataSource::Sphere {
                n, d, target_index, scale, ..
            } => {
                if *n == 0 || *d == 0 {
                    return Err(Error::config("dataset.source", "n and d must be >= 1"));
                }
                if target_index >= n {
                    return Err(Error::config("dataset.source.target_index", format!("must be < n = {n}")));
                }
                if !scale.is_finite() {
                    return Err(Error::config("dataset.source.scale", "must be finite"));
                }
            }
            DataSource::Csv { .. } => {}
        }
        if let (Some(s), Some(n)) = (self.split, self.row_count()) {
            if s.train == 0 {
                return Err(Error::config("dataset.split.train", "must be >= 1"));
            }
            if s.train + s.validation + s.test > n {
                return Err(Error::config(
                    "dataset.split",
                    format!("sizes {}+{}+{} exceed n = {n}", s.train, s.validation, s.test),
                ));
            }
        }
        Ok(())
    }

    fn row_count(&self) -> Option<usize> {
        match &self.source {
            DataSource::Synthetic { n, .. } | DataSource::Sphere { n, .. } => Some(*n),
            DataSource::Csv { .. } => None,
        }
    }

    pub fn build(&self) -> Result<Dataset> {
        self.validate()?;
        let ds = match &self.source {
            DataSource::Synthetic {
                target,
                n,
                d,
                noise_sigma,
                seed,
            } => data::generate_synthetic(target.clone(), *n, *d, *noise_sigma, *seed)?,
            DataSource::Sphere {
                n,
                d,
                scale,
                target_index,
                seed,
            } => data::generate_scaled_point_sphere(*n, *d, *scale, *target_index, *seed)?,
            DataSource::Csv { path } => data::load_csv(path)?,
        };
        match self.split {
            Some(s) => data::split(ds, s.train, s.validation, s.test, s.seed),
            None => Ok(ds),
        }
    }

    /// Replaces the data and split seeds by their sub-seeds under `master`.
    pub fn with_master_seed(mut self, master: u64) -> Self {
        self.apply_master_seed(master);
        self
    }

    pub(crate) fn apply_master_seed(&mut self, master: u64) {
        match &mut self.source {
            DataSource::Synthetic { seed, .. } | DataSource::Sphere { seed, .. } => {
                *seed = sub_seed(master, "dataset");
            }
            DataSource::Csv { .. } => {}
        }
        if let Some(s) = &mut self.split {
            s.seed = sub_seed(master, "split");
        }
    }
}

/// The seed a role gets under a master seed: `derive_seed(master, role)`.
///
/// Roles are `dataset`, `split`, `model`, `sampler` and `egop`.
pub fn sub_seed(master: u64, role: &str) -> u64 {
    derive_seed(master, role)
}

/// Which inputs the AGOP is averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AgopInputs {
    #[default]
    Train,
    Validation,
    Test,
}

fn default_name() -> String {
    "run".into()
}

/// A complete single training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// When set, every seed below is replaced by `sub_seed(master_seed, role)`.
    #[serde(default)]
    pub master_seed: Option<u64>,
    pub dataset: DataConfig,
    pub model: MlpConfig,
    pub optimizer: OptimizerSpec,
    /// Read the schedule's rates as multiples of `η̃_crit` of the initial
    /// network on the training split.
    #[serde(default)]
    pub lr_relative_to_crit: bool,
    #[serde(default)]
    pub instrument: InstrumentConfig,
    /// Also estimate `2/λ_max(H)` at initialization.
    #[serde(default)]
    pub hessian_probe: bool,
    #[serde(default)]
    pub stop: StopConfig,
    #[serde(default)]
    pub agop_inputs: AgopInputs,
    /// CSV matrix used as the alignment reference instead of the target's EGOP.
    #[serde(default)]
    pub reference_agop: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(name: impl Into<String>, dataset: DataConfig, model: MlpConfig, optimizer: OptimizerSpec) -> Self {
        Self {
            name: name.into(),
            master_seed: None,
            dataset,
            model,
            optimizer,
            lr_relative_to_crit: false,
            instrument: InstrumentConfig::default(),
            hessian_probe: false,
            stop: StopConfig::default(),
            agop_inputs: AgopInputs::Train,
            reference_agop: None,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Sets the master seed, which takes effect in [`ExperimentConfig::resolved`].
    pub fn with_master_seed(mut self, seed: u64) -> Self {
        self.master_seed = Some(seed);
        self
    }

    /// The config with the master seed pushed into every sub-seed.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        if let Some(m) = cfg.master_seed {
            cfg.dataset.apply_master_seed(m);
            cfg.model.seed = sub_seed(m, "model");
            cfg.optimizer.sampler_seed = sub_seed(m, "sampler");
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty plain file name"));
        }
        self.dataset.validate()?;
        self.model.validate().map_err(|e| Error::config("model", e.to_string()))?;
        if let Some(d) = self.dataset.declared_dim() {
            if d != self.model.input_dim {
                return Err(Error::config(
                    "model.input_dim",
                    format!("is {} but the dataset has d = {d}", self.model.input_dim),
                ));
            }
        }
        if let Some(s) = self.dataset.split {
            self.optimizer.validate(s.train)?;
            self.instrument.validate(s.train)?;
        }
        if !(self.stop.loss_threshold >= 0.0) || !(self.stop.divergence_threshold > 0.0) {
            return Err(Error::config("stop", "thresholds must be non-negative"));
        }
        Ok(())
    }

    /// Output directory: an explicit override first, then `$CATAPULT_OUT/<name>`,
    /// then the configured directory, then `runs/<name>`.
    pub fn output_dir(&self, explicit: Option<&Path>) -> PathBuf {
        resolve_output_dir(explicit, self.output_dir.as_deref(), &self.name)
    }
}

pub fn resolve_output_dir(explicit: Option<&Path>, configured: Option<&Path>, name: &str) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV).filter(|r| !r.is_empty()) {
        return PathBuf::from(root).join(name);
    }
    configured.map_or_else(|| PathBuf::from("runs").join(name), Path::to_path_buf)
}

/// Headline numbers of one finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub status: TerminalStatus,
    pub iterations: usize,
    pub initial_lr: f64,
    /// `n/λ_max(K)` of the initial network on the training split.
    pub eta_crit_init: f64,
    pub eta_crit_hessian_init: Option<f64>,
    /// Steps with `η − η̃_crit(batch) > 1e-8` up to the best validation loss.
    pub catapult_events: Option<usize>,
    pub catapult_clusters: Option<usize>,
    pub best_validation_loss: Option<f64>,
    pub best_validation_iteration: Option<usize>,
    pub final_train_loss: f64,
    /// Test MSE against the noisy labels.
    pub test_loss: Option<f64>,
    /// Test MSE against the noise-free target, when known.
    pub test_loss_clean: Option<f64>,
    pub alignment: Option<f64>,
    pub seeds: BTreeMap<String, u64>,
}

pub struct RunOutcome {
    /// The configuration after seed resolution.
    pub config: ExperimentConfig,
    pub model: Mlp,
    pub log: RunLog,
    pub summary: RunSummary,
}

/// Builds the data, initializes the network, trains and summarizes.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    let cfg = config.resolved();
    cfg.validate()?;
    let ds = cfg.dataset.build()?;
    if ds.d() != cfg.model.input_dim {
        return Err(Error::config(
            "model.input_dim",
            format!("is {} but the dataset has d = {}", cfg.model.input_dim, ds.d()),
        ));
    }
    let model = Mlp::init(cfg.model.clone())?;
    let train_part = ds.train();
    let eta_crit_init = critical_lr_ntk(&ntk_matrix(&model, &train_part.x)?, train_part.len())?;
    let eta_crit_hessian_init = if cfg.hessian_probe {
        Some(critical_lr_hessian(&model, &train_part.x, &train_part.y)?)
    } else {
        None
    };
    let mut opt = cfg.optimizer.clone();
    if cfg.lr_relative_to_crit {
        opt.schedule = opt.schedule.scaled(eta_crit_init);
    }
    let extra = json!({
        "experiment": &cfg,
        "eta_crit_init": eta_crit_init,
        "eta_crit_hessian_init": eta_crit_hessian_init,
    });
    let (model, log) = train_annotated(model, &ds, &opt, &cfg.instrument, &cfg.stop, extra)?;
    let summary = summarize_run(&cfg, &ds, &model, &log, eta_crit_init, eta_crit_hessian_init)?;
    Ok(RunOutcome {
        config: cfg,
        model,
        log,
        summary,
    })
}

fn summarize_run(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    model: &Mlp,
    log: &RunLog,
    eta_crit_init: f64,
    eta_crit_hessian_init: Option<f64>,
) -> Result<RunSummary> {
    let events = if log.steps.iter().all(|s| s.eta_crit_batch.is_some()) {
        Some(detect_catapult_events(log, DEFAULT_EVENT_EPSILON, Horizon::BestValidation)?)
    } else {
        None
    };
    let best_validation = log
        .steps
        .iter()
        .filter_map(|s| s.validation_loss.map(|v| (s.iteration, v)))
        .chain(log.terminal.final_validation_loss.map(|v| (log.steps.len(), v)))
        .filter(|(_, v)| v.is_finite())
        .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((i, v)),
        });
    let healthy = log.status() != TerminalStatus::Diverged;
    let test = ds.test();
    let (test_loss, test_loss_clean) = if healthy && !test.is_empty() {
        let pred = model.predict(&test.x)?;
        let loss = |y: &[f64]| pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64;
        (Some(loss(&test.y)), test.clean_y.as_deref().map(loss))
    } else {
        (None, None)
    };
    let alignment = if healthy { agop_alignment(cfg, ds, model)? } else { None };
    let mut seeds = BTreeMap::new();
    seeds.insert("model".to_string(), cfg.model.seed);
    seeds.insert("sampler".to_string(), cfg.optimizer.sampler_seed);
    match ds.provenance() {
        Provenance::Synthetic { seed, .. } | Provenance::ScaledSphere { seed, .. } => {
            seeds.insert("dataset".to_string(), *seed);
        }
        _ => {}
    }
    if let Some(s) = cfg.dataset.split {
        seeds.insert("split".to_string(), s.seed);
    }
    if let Some(m) = cfg.master_seed {
        seeds.insert("master".to_string(), m);
    }
    Ok(RunSummary {
        name: cfg.name.clone(),
        status: log.status(),
        iterations: log.terminal.iterations,
        initial_lr: log.steps.first().map_or(f64::NAN, |s| s.lr),
        eta_crit_init,
        eta_crit_hessian_init,
        catapult_events: events.as_ref().map(|e| e.event_count),
        catapult_clusters: events.as_ref().map(|e| e.clustered_count),
        best_validation_loss: best_validation.map(|b| b.1),
        best_validation_iteration: best_validation.map(|b| b.0),
        final_train_loss: log.terminal.final_train_loss,
        test_loss,
        test_loss_clean,
        alignment,
        seeds,
    })
}

fn agop_alignment(cfg: &ExperimentConfig, ds: &Dataset, model: &Mlp) -> Result<Option<f64>> {
    let part = match cfg.agop_inputs {
        AgopInputs::Train => ds.train(),
        AgopInputs::Validation => ds.validation(),
        AgopInputs::Test => ds.test(),
    };
    if part.is_empty() {
        return Ok(None);
    }
    let reference = match reference_matrix(cfg, ds)? {
        Some(r) => r,
        None => return Ok(None),
    };
    let g = agop(model, &part.x)?;
    match alignment(&g, &reference) {
        Ok(a) => Ok(Some(a)),
        Err(Error::UndefinedAlignment(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// The alignment reference: a CSV matrix if configured, else the target's EGOP.
pub fn reference_matrix(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Option<DenseMatrix>> {
    if let Some(path) = &cfg.reference_agop {
        let m = DenseMatrix::read_csv(path)?;
        if m.shape() != (ds.d(), ds.d()) {
            return Err(Error::contract(format!(
                "reference matrix is {}x{} but inputs have d = {}",
                m.rows(),
                m.cols(),
                ds.d()
            )));
        }
        return Ok(Some(m));
    }
    match ds.provenance() {
        Provenance::Synthetic { target, d, seed, .. } => target_egop(target, *d, sub_seed(*seed, "egop")).map(Some),
        _ => Ok(None),
    }
}

/// Closed-form EGOP when available, otherwise a Monte-Carlo estimate.
pub fn target_egop(target: &TargetFunction, d: usize, seed: u64) -> Result<DenseMatrix> {
    match target.exact_egop(d) {
        Some(m) => Ok(m),
        None => Ok(egop_oracle(target, d, DEFAULT_EGOP_SAMPLES, seed)?.monte_carlo),
    }
}

/// Writes `run.jsonl`, `run.csv`, `checkpoint.json`, `summary.json` and the
/// `meta.json` sidecar into `dir`. Only the sidecar varies between reruns.
pub fn write_run_outputs(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    outcome.log.write_jsonl(&dir.join("run.jsonl"))?;
    outcome.log.write_csv(&dir.join("run.csv"))?;
    let echo = serde_json::to_value(&outcome.config)?;
    outcome.model.save_annotated(&dir.join("checkpoint.json"), Some(echo.clone()))?;
    let summary = json!({ "config": echo, "summary": &outcome.summary });
    write_json(&dir.join("summary.json"), &summary)?;
    write_sidecar(dir)
}

/// Timestamp and host of the process that produced `dir`.
pub fn write_sidecar(dir: &Path) -> Result<()> {
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let host = std::env::var("HOSTNAME").unwrap_or_else(|_| "unknown".into());
    let meta = json!({
        "created_unix_seconds": created,
        "host": host,
        "package_version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&dir.join("meta.json"), &meta)
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Paths written by [`generate_dataset_files`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFiles {
    pub csv: PathBuf,
    pub provenance: PathBuf,
    /// FNV-1a hash of the CSV bytes.
    pub content_hash: u64,
}

/// Writes `<stem>.csv` and `<stem>.provenance.json` for the configured data.
pub fn generate_dataset_files(cfg: &DataConfig, dir: &Path, stem: &str) -> Result<DatasetFiles> {
    let ds = cfg.build()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    ds.write_csv(&csv)?;
    let bytes = std::fs::read(&csv).map_err(|e| Error::io(&csv, e))?;
    let content_hash = fnv1a(&bytes);
    let provenance = dir.join(format!("{stem}.provenance.json"));
    let record: Value = json!({
        "provenance": ds.provenance(),
        "config": cfg,
        "rows": ds.n(),
        "d": ds.d(),
        "split": ds.split(),
        "content_hash": format!("{content_hash:016x}"),
    });
    write_json(&provenance, &record)?;
    Ok(DatasetFiles {
        csv,
        provenance,
        content_hash,
    })
}
