use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{
    resolve_output_dir, run_experiment, write_json, write_run_outputs, write_sidecar, DataConfig, DataSource,
    ExperimentConfig, RunOutcome, RunSummary, SplitSizes,
};
use crate::data::TargetFunction;
use crate::error::{Error, Result};
use crate::kernel::{critical_lr_hessian, critical_lr_ntk, ntk_matrix};
use crate::network::{Mlp, MlpConfig};
use crate::rng::derive_seed;
use crate::trainer::{
    staged_raise_schedule, summarize_catapults, InstrumentConfig, OptimizerKind, OptimizerSpec, RunLog, Sampling,
    Schedule, StagedRaise, StopConfig, TerminalStatus,
};

/// Input dimension shared by the synthetic suites.
const SYNTHETIC_DIM: usize = 100;
const LABEL_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Table1BatchSweep,
    OptimizerSweep,
    MultiCatapult,
    ExactMatch,
    SmallLrControl,
    CritLrValidation,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Table1BatchSweep,
        Suite::OptimizerSweep,
        Suite::MultiCatapult,
        Suite::ExactMatch,
        Suite::SmallLrControl,
        Suite::CritLrValidation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Table1BatchSweep => "table1_batch_sweep",
            Suite::OptimizerSweep => "optimizer_sweep",
            Suite::MultiCatapult => "multi_catapult",
            Suite::ExactMatch => "exact_match",
            Suite::SmallLrControl => "small_lr_control",
            Suite::CritLrValidation => "crit_lr_validation",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let known: Vec<_> = Suite::ALL.iter().map(|x| x.name()).collect();
            Error::config("suite", format!("unknown suite {s:?}; known: {}", known.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    /// Multiplies sample counts and widths (never batch sizes or `d`).
    pub scale: f64,
    pub seeds: usize,
    pub master_seed: u64,
    /// Epoch budget per training run; suites pick their own default.
    pub max_epochs: Option<usize>,
    /// Hard cap on iterations per training run.
    pub max_iters: Option<usize>,
    /// Write every sub-run's artifacts under `<out>/runs/`.
    pub keep_runs: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            scale: 1.0,
            seeds: 3,
            master_seed: 0,
            max_epochs: None,
            max_iters: None,
            keep_runs: false,
        }
    }
}

impl SuiteOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config("scale", "must be a positive number"));
        }
        if self.seeds == 0 {
            return Err(Error::config("seeds", "must be >= 1"));
        }
        Ok(())
    }

    fn size(&self, base: usize, min: usize) -> usize {
        ((base as f64 * self.scale).round() as usize).max(min)
    }

    fn seed(&self, k: usize) -> u64 {
        derive_seed(self.master_seed, &format!("suite.seed.{k}"))
    }

    fn iteration_cap(&self, epochs_default: usize, steps_per_epoch: usize) -> usize {
        let by_epochs = self.max_epochs.unwrap_or(epochs_default) * steps_per_epoch;
        self.max_iters.map_or(by_epochs, |m| m.min(by_epochs))
    }
}

/// One sub-run of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRun {
    pub configuration: String,
    pub seed_index: usize,
    pub config: Option<ExperimentConfig>,
    pub summary: Option<RunSummary>,
    /// Suite-specific numbers (rates, gaps, counts).
    pub metrics: BTreeMap<String, f64>,
}

/// Seed averages for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub configuration: String,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub catapult_count: Option<f64>,
    pub best_validation_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_loss_clean: Option<f64>,
    pub alignment: Option<f64>,
    pub diverged_runs: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub options: SuiteOptions,
    pub rows: Vec<SuiteRow>,
    pub runs: Vec<SuiteRun>,
    /// First sub-run that broke the suite's expectations.
    pub failure: Option<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }

    pub fn row(&self, configuration: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.configuration == configuration)
    }

    /// `summary.csv`, `report.json` and the `meta.json` sidecar.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_csv(&dir.join("summary.csv"))?;
        write_json(&dir.join("report.json"), self)?;
        write_sidecar(dir)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let metric_names: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.metrics.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header: Vec<String> = [
            "configuration",
            "runs",
            "seeds",
            "catapult_count",
            "best_validation_loss",
            "test_loss",
            "test_loss_clean",
            "agop_alignment",
            "diverged_runs",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(metric_names.iter().cloned());
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let mut rec = vec![
                r.configuration.clone(),
                r.runs.to_string(),
                seeds.join(";"),
                opt(r.catapult_count),
                opt(r.best_validation_loss),
                opt(r.test_loss),
                opt(r.test_loss_clean),
                opt(r.alignment),
                r.diverged_runs.to_string(),
            ];
            rec.extend(metric_names.iter().map(|m| opt(r.metrics.get(m).copied())));
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::contract(format!("{}: {other:?}", path.display())),
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn aggregate(runs: &[SuiteRun], seeds: &[u64]) -> Vec<SuiteRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.configuration.as_str()) {
            order.push(&r.configuration);
        }
    }
    order
        .into_iter()
        .map(|name| {
            let group: Vec<&SuiteRun> = runs.iter().filter(|r| r.configuration == name).collect();
            let summaries: Vec<&RunSummary> = group.iter().filter_map(|r| r.summary.as_ref()).collect();
            let field = |f: fn(&RunSummary) -> Option<f64>| mean(summaries.iter().filter_map(|s| f(s)));
            let mut metrics = BTreeMap::new();
            let keys: std::collections::BTreeSet<&String> = group.iter().flat_map(|r| r.metrics.keys()).collect();
            for k in keys {
                if let Some(m) = mean(group.iter().filter_map(|r| r.metrics.get(k).copied())) {
                    metrics.insert(k.clone(), m);
                }
            }
            SuiteRow {
                configuration: name.to_string(),
                runs: group.len(),
                seeds: group.iter().map(|r| seeds[r.seed_index]).collect(),
                catapult_count: field(|s| s.catapult_events.map(|c| c as f64)),
                best_validation_loss: field(|s| s.best_validation_loss),
                test_loss: field(|s| s.test_loss),
                test_loss_clean: field(|s| s.test_loss_clean),
                alignment: field(|s| s.alignment),
                diverged_runs: summaries.iter().filter(|s| s.status == TerminalStatus::Diverged).count(),
                metrics,
            }
        })
        .collect()
}

/// Runs a suite; with `out`, also writes its report (and sub-runs if asked).
pub fn run_suite(suite: Suite, opts: &SuiteOptions, out: Option<&Path>) -> Result<SuiteReport> {
    opts.validate()?;
    let mut ctx = SuiteContext {
        opts,
        runs_dir: out.filter(|_| opts.keep_runs).map(|o| o.join("runs")),
        runs: Vec::new(),
        failure: None,
    };
    match suite {
        Suite::Table1BatchSweep => batch_sweep(&mut ctx, 0.5)?,
        Suite::SmallLrControl => batch_sweep(&mut ctx, 1.0 / 40.0)?,
        Suite::OptimizerSweep => optimizer_sweep(&mut ctx)?,
        Suite::MultiCatapult => multi_catapult(&mut ctx)?,
        Suite::ExactMatch => exact_match(&mut ctx)?,
        Suite::CritLrValidation => crit_lr_validation(&mut ctx)?,
    }
    let seeds: Vec<u64> = (0..opts.seeds).map(|k| opts.seed(k)).collect();
    let report = SuiteReport {
        suite,
        options: opts.clone(),
        rows: aggregate(&ctx.runs, &seeds),
        runs: ctx.runs,
        failure: ctx.failure,
    };
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}

/// Default report directory for a suite.
pub fn suite_output_dir(suite: Suite, explicit: Option<&Path>) -> PathBuf {
    resolve_output_dir(explicit, None, suite.name())
}

struct SuiteContext<'a> {
    opts: &'a SuiteOptions,
    runs_dir: Option<PathBuf>,
    runs: Vec<SuiteRun>,
    failure: Option<String>,
}

impl SuiteContext<'_> {
    /// Trains one configuration; divergence marks the suite failed unless expected.
    fn train(
        &mut self,
        label: &str,
        k: usize,
        cfg: ExperimentConfig,
        expect_divergence: bool,
    ) -> Result<(RunOutcome, usize)> {
        let outcome = run_experiment(&cfg)?;
        if let Some(dir) = &self.runs_dir {
            write_run_outputs(&outcome, &dir.join(format!("{label}-seed{k}")))?;
        }
        let diverged = outcome.summary.status == TerminalStatus::Diverged;
        if diverged != expect_divergence && self.failure.is_none() {
            let what = if diverged { "diverged" } else { "did not diverge" };
            self.failure = Some(format!("{label} (seed index {k}) {what}"));
        }
        self.runs.push(SuiteRun {
            configuration: label.to_string(),
            seed_index: k,
            config: Some(outcome.config.clone()),
            summary: Some(outcome.summary.clone()),
            metrics: BTreeMap::new(),
        });
        Ok((outcome, self.runs.len() - 1))
    }

    fn fail(&mut self, message: String) {
        if self.failure.is_none() {
            self.failure = Some(message);
        }
    }
}

fn rank2_data(train: usize, validation: usize, test: usize) -> DataConfig {
    DataConfig::synthetic(
        TargetFunction::Rank2,
        train + validation + test,
        SYNTHETIC_DIM,
        LABEL_NOISE,
        0,
    )
    .with_split(SplitSizes {
        train,
        validation,
        test,
        seed: 0,
    })
}

/// Per-epoch logging: kernels only per batch, losses once per epoch.
fn epoch_instrument(steps_per_epoch: usize, batch_ntk: bool) -> InstrumentConfig {
    InstrumentConfig {
        batch_ntk,
        full_ntk_every: None,
        decompose_top: None,
        train_loss_every: steps_per_epoch,
        validation_every: Some(steps_per_epoch),
        force_on_events: false,
        ..InstrumentConfig::default()
    }
}

/// Batch-size configurations of the Rank-2 sweep: full batch first.
pub fn batch_sweep_sizes(n_train: usize) -> Vec<usize> {
    let mut sizes = vec![n_train];
    sizes.extend([50, 10, 5].into_iter().filter(|&b| b < n_train));
    sizes
}

/// Bias-free networks: with zero-init biases the batch critical rates sit too
/// close to the full-batch one for `eta_crit / 2` to cross them at any batch size.
fn batch_sweep(ctx: &mut SuiteContext<'_>, lr_factor: f64) -> Result<()> {
    let opts = ctx.opts;
    let (n_train, n_val, n_test) = (opts.size(2000, 20), opts.size(5000, 20), opts.size(5000, 20));
    let width = opts.size(1024, 16);
    for k in 0..opts.seeds {
        for b in batch_sweep_sizes(n_train) {
            let spe = n_train.div_ceil(b);
            let optimizer = if b == n_train {
                OptimizerSpec::gd(lr_factor)
            } else {
                OptimizerSpec::sgd(b, lr_factor, 0)
            };
            let label = format!("b={b}");
            let mut cfg = ExperimentConfig::new(
                format!("{}-{label}", suite_tag(lr_factor)),
                rank2_data(n_train, n_val, n_test),
                MlpConfig::two_layer(SYNTHETIC_DIM, width, 0).with_bias(false),
                optimizer,
            )
            .with_master_seed(opts.seed(k));
            cfg.lr_relative_to_crit = true;
            cfg.instrument = epoch_instrument(spe, true);
            cfg.stop = StopConfig::max_iters(opts.iteration_cap(1000, spe));
            ctx.train(&label, k, cfg, false)?;
        }
    }
    Ok(())
}

fn suite_tag(lr_factor: f64) -> &'static str {
    if lr_factor < 0.1 {
        "small_lr"
    } else {
        "table1"
    }
}

/// Optimizers and absolute learning rates of the optimizer comparison.
pub fn optimizer_grid() -> Vec<(&'static str, OptimizerKind, f64)> {
    vec![
        ("sgd", OptimizerKind::Sgd, 2.0),
        ("gd", OptimizerKind::Gd, 2.0),
        ("momentum", OptimizerKind::momentum(), 2.0),
        ("adadelta", OptimizerKind::adadelta(), 2.0),
        ("adagrad", OptimizerKind::Adagrad, 0.1),
        ("rmsprop", OptimizerKind::rmsprop(), 1e-2),
        ("adam", OptimizerKind::adam(), 1e-2),
    ]
}

fn optimizer_sweep(ctx: &mut SuiteContext<'_>) -> Result<()> {
    let opts = ctx.opts;
    let (n_train, n_val, n_test) = (opts.size(2000, 20), opts.size(5000, 20), opts.size(5000, 20));
    let width = opts.size(1024, 16);
    let b = 100.min(n_train);
    for k in 0..opts.seeds {
        for (label, kind, lr) in optimizer_grid() {
            let batch = (kind != OptimizerKind::Gd).then_some(b);
            let spe = n_train.div_ceil(batch.unwrap_or(n_train));
            let mut cfg = ExperimentConfig::new(
                format!("optimizer-{label}"),
                rank2_data(n_train, n_val, n_test),
                MlpConfig::two_layer(SYNTHETIC_DIM, width, 0),
                OptimizerSpec::new(kind, batch, Schedule::Constant { lr }),
            )
            .with_master_seed(opts.seed(k));
            cfg.instrument = epoch_instrument(spe, true);
            cfg.stop = StopConfig::max_iters(opts.iteration_cap(1000, spe));
            ctx.train(label, k, cfg, false)?;
        }
    }
    Ok(())
}

/// Raise plan of the multi-catapult suite.
pub const MULTI_CATAPULT_PLAN: StagedRaise = StagedRaise {
    warmup: 20,
    raises: 2,
    multiplier: 1.5,
    cooldown: 20,
    budget: 500,
};

/// Steps the divergence control is given to blow up.
pub const DIVERGENCE_WINDOW: usize = 500;

/// The GD configuration of the single- and multi-catapult experiments:
/// Rank-2 with `n = 128`, `d = 100`, a width-1024 two-layer network.
///
/// The multi-catapult suite passes `bias = false`. With zero-initialized
/// trainable biases a rate far above the critical one drives every unit
/// inactive, so the loss plateaus at the label energy instead of diverging,
/// and the divergence control could never fire.
pub fn catapult_setup(opts: &SuiteOptions, k: usize, bias: bool) -> ExperimentConfig {
    let (n_train, n_val, n_test) = (opts.size(128, 16), opts.size(1000, 16), opts.size(1000, 16));
    let mut cfg = ExperimentConfig::new(
        "catapult",
        rank2_data(n_train, n_val, n_test),
        MlpConfig::two_layer(SYNTHETIC_DIM, opts.size(1024, 16), 0).with_bias(bias),
        OptimizerSpec::gd(1.0),
    )
    .with_master_seed(opts.seed(k));
    cfg.instrument = InstrumentConfig {
        full_ntk_every: Some(10),
        decompose_top: Some(5),
        validation_every: Some(10),
        ..InstrumentConfig::default()
    };
    cfg.stop = StopConfig::max_iters(opts.max_iters.unwrap_or(5000));
    cfg.resolved()
}

/// A raise schedule for `cfg` found by [`staged_raise_schedule`], starting at
/// half the initial critical rate.
pub fn multi_catapult_schedule(cfg: &ExperimentConfig, plan: &StagedRaise) -> Result<Schedule> {
    let cfg = cfg.resolved();
    let ds = cfg.dataset.build()?;
    let model = Mlp::init(cfg.model.clone())?;
    let train = ds.train();
    let eta = critical_lr_ntk(&ntk_matrix(&model, &train.x)?, train.len())?;
    let opt = OptimizerSpec::gd(0.5 * eta);
    staged_raise_schedule(&model, &ds, &opt, plan)
}

fn multi_catapult(ctx: &mut SuiteContext<'_>) -> Result<()> {
    let opts = ctx.opts;
    for k in 0..opts.seeds {
        let base = catapult_setup(opts, k, false);
        let schedule = match multi_catapult_schedule(&base, &MULTI_CATAPULT_PLAN) {
            Ok(s) => s,
            Err(e @ Error::Numerical { .. }) => {
                ctx.fail(format!("multi (seed index {k}): {e}"));
                continue;
            }
            Err(e) => return Err(e),
        };
        let final_lr = match &schedule {
            Schedule::StepIncrease { steps, .. } => steps.last().map_or(f64::NAN, |s| s.1),
            other => other.initial_lr(),
        };
        let mut cfg = base.clone();
        cfg.name = "multi".into();
        cfg.optimizer.schedule = schedule;
        let (outcome, idx) = ctx.train("multi", k, cfg, false)?;
        let m = multi_catapult_metrics(&outcome.log);
        ctx.runs[idx].metrics.extend(m);

        let mut control = base;
        control.name = "divergence_control".into();
        control.optimizer.schedule = Schedule::Constant { lr: final_lr };
        control.instrument = InstrumentConfig::minimal();
        control.stop = StopConfig::max_iters(DIVERGENCE_WINDOW);
        let (outcome, idx) = ctx.train("divergence_control", k, control, true)?;
        let diverged = outcome.summary.status == TerminalStatus::Diverged;
        ctx.runs[idx].metrics.insert("diverged".into(), f64::from(u8::from(diverged)));
        ctx.runs[idx].metrics.insert("lr".into(), final_lr);
    }
    Ok(())
}

/// Catapult count and how many catapults lowered `‖K‖₂`.
pub fn multi_catapult_metrics(log: &RunLog) -> BTreeMap<String, f64> {
    let summary = summarize_catapults(log);
    let catapults: Vec<_> = summary.catapults().collect();
    let lowered = catapults
        .iter()
        .filter(|c| matches!((c.spectral_norm_before, c.spectral_norm_after), (Some(b), Some(a)) if a < b))
        .count();
    BTreeMap::from([
        ("catapults".to_string(), catapults.len() as f64),
        ("norm_decreases".to_string(), lowered as f64),
        ("windows".to_string(), summary.windows.len() as f64),
    ])
}

/// Sphere experiment with one scaled point: `n = d = 100`, scale 2, SGD with
/// batch size 1 drawn with replacement, second layer frozen, no biases.
pub fn exact_match_setup(opts: &SuiteOptions, k: usize) -> ExperimentConfig {
    let n = 100;
    let data = DataConfig {
        source: DataSource::Sphere {
            n,
            d: n,
            scale: 2.0,
            target_index: 0,
            seed: 0,
        },
        split: None,
    };
    let model = MlpConfig::two_layer(n, opts.size(1024, 64), 0)
        .with_bias(false)
        .with_frozen_output(true);
    let optimizer = OptimizerSpec::sgd(1, 1.0, 0).with_sampling(Sampling::WithReplacement);
    let mut cfg = ExperimentConfig::new("exact_match", data, model, optimizer).with_master_seed(opts.seed(k));
    cfg.instrument = InstrumentConfig {
        batch_ntk: true,
        full_ntk_every: None,
        decompose_top: None,
        train_loss_every: 1,
        validation_every: None,
        record_batches: true,
        force_on_events: false,
        ..InstrumentConfig::default()
    };
    cfg.stop = StopConfig::max_iters(opts.max_iters.unwrap_or(2000));
    cfg.resolved()
}

/// Per-sample critical rates `1/K(xᵢ, xᵢ)` of the initial network.
pub fn per_sample_critical_rates(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let cfg = cfg.resolved();
    let ds = cfg.dataset.build()?;
    let model = Mlp::init(cfg.model.clone())?;
    let k = ntk_matrix(&model, &ds.train().x)?;
    Ok((0..k.n()).map(|i| 1.0 / k.matrix().get(i, i)).collect())
}

/// Geometric mean of the scaled point's critical rate and the smallest
/// critical rate among the other points.
pub fn rate_between(rates: &[f64], target_index: usize) -> Result<f64> {
    let target = rates[target_index];
    let others = rates
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_index)
        .map(|(_, r)| *r)
        .fold(f64::INFINITY, f64::min);
    if !(target < others) {
        return Err(Error::contract(format!(
            "scaled point's critical rate {target} is not below the others' minimum {others}"
        )));
    }
    Ok((target * others).sqrt())
}

/// Co-location of events with draws of one sample in a batch-size-1 run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactMatchStats {
    /// Steps flagged `lr > η_crit(batch)`.
    pub flagged: usize,
    pub flagged_on_target: usize,
    /// Steps whose training loss rose by more than the noise floor.
    pub increases: usize,
    pub increases_on_target: usize,
}

impl ExactMatchStats {
    pub fn flag_precision(&self) -> f64 {
        self.flagged_on_target as f64 / self.flagged as f64
    }

    pub fn increase_precision(&self) -> f64 {
        self.increases_on_target as f64 / self.increases as f64
    }
}

/// Needs a log recorded with `record_batches` and per-step training loss.
pub fn exact_match_stats(log: &RunLog, target_index: usize, floor: f64) -> Result<ExactMatchStats> {
    let mut s = ExactMatchStats {
        flagged: 0,
        flagged_on_target: 0,
        increases: 0,
        increases_on_target: 0,
    };
    for (i, step) in log.steps.iter().enumerate() {
        let batch = step
            .batch_indices
            .as_ref()
            .ok_or_else(|| Error::contract(format!("step {} has no recorded batch", step.iteration)))?;
        let on_target = batch.contains(&target_index);
        if step.flags.lr_exceeds_crit {
            s.flagged += 1;
            s.flagged_on_target += usize::from(on_target);
        }
        if let (Some(before), Some(after)) = (step.train_loss, log.loss_after(i)) {
            if after - before > floor {
                s.increases += 1;
                s.increases_on_target += usize::from(on_target);
            }
        }
    }
    Ok(s)
}

fn exact_match(ctx: &mut SuiteContext<'_>) -> Result<()> {
    let opts = ctx.opts;
    for k in 0..opts.seeds {
        let mut cfg = exact_match_setup(opts, k);
        let rates = per_sample_critical_rates(&cfg)?;
        let lr = rate_between(&rates, 0)?;
        cfg.optimizer.schedule = Schedule::Constant { lr };
        let (outcome, idx) = ctx.train("exact_match", k, cfg, false)?;
        let stats = exact_match_stats(&outcome.log, 0, 1e-6)?;
        ctx.runs[idx].metrics.extend([
            ("lr".to_string(), lr),
            ("flagged_steps".to_string(), stats.flagged as f64),
            ("flag_precision".to_string(), stats.flag_precision()),
            ("loss_increase_steps".to_string(), stats.increases as f64),
            ("increase_precision".to_string(), stats.increase_precision()),
        ]);
    }
    Ok(())
}

/// Relative gap `|2/λ_max(H) − n/λ_max(K)| / (n/λ_max(K))` at initialization.
pub fn crit_gap(model: &Mlp, x: &crate::linalg::DenseMatrix, y: &[f64]) -> Result<(f64, f64, f64)> {
    let ntk = critical_lr_ntk(&ntk_matrix(model, x)?, y.len())?;
    let hessian = critical_lr_hessian(model, x, y)?;
    Ok(((hessian - ntk).abs() / ntk, hessian, ntk))
}

/// Widths compared by the critical-rate validation.
pub fn crit_widths(opts: &SuiteOptions) -> Vec<usize> {
    [1024, 2048, 4096].iter().map(|&m| opts.size(m, 8)).collect()
}

fn crit_lr_validation(ctx: &mut SuiteContext<'_>) -> Result<()> {
    let opts = ctx.opts;
    let n = 64;
    for k in 0..opts.seeds {
        let seed = opts.seed(k);
        let mut data = rank2_data(n, 0, 0);
        data.apply_master_seed(seed);
        let ds = data.build()?;
        let train = ds.train();
        for m in crit_widths(opts) {
            let model = Mlp::init(MlpConfig::two_layer(SYNTHETIC_DIM, m, derive_seed(seed, "model")))?;
            let (gap, hessian, ntk) = crit_gap(&model, &train.x, &train.y)?;
            ctx.runs.push(SuiteRun {
                configuration: format!("m={m}"),
                seed_index: k,
                config: None,
                summary: None,
                metrics: BTreeMap::from([
                    ("relative_gap".to_string(), gap),
                    ("eta_crit_hessian".to_string(), hessian),
                    ("eta_crit_ntk".to_string(), ntk),
                ]),
            });
        }
    }
    Ok(())
}
