use serde::{Deserialize, Serialize};

use super::events::{opens_window, SpikeTracker};
use super::optimizer::{OptimizerKind, OptimizerSpec, OptimizerState, Sampling};
use super::record::{EventFlags, RunHeader, RunLog, Seeds, StepRecord, TerminalRecord, TerminalStatus, RUNLOG_FORMAT_VERSION};
use super::schedule::Schedule;
use crate::data::{Dataset, Part};
use crate::error::{Error, Result};
use crate::kernel::{
    critical_lr_from_norm, decompose_residual, gram_from_trace, ntk_top_eigenpair, DEFAULT_BLOCK_ROWS, MATRIX_FREE_MIN_ROWS,
};
use crate::linalg::{spectral_norm, sym_eigen, DenseMatrix, EigenBasis};
use crate::network::{mean_squared_residual, Mlp};
use crate::rng::ShiftRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EigenbasisMode {
    /// Decompose along the eigenvectors of the NTK at the current step.
    #[default]
    Current,
    /// Keep the eigenbasis of the initial NTK for the whole run.
    FrozenAtInit,
}

fn yes() -> bool {
    true
}
fn every_ten() -> Option<usize> {
    Some(10)
}
fn five() -> Option<usize> {
    Some(5)
}
fn one() -> usize {
    1
}
fn every_step() -> Option<usize> {
    Some(1)
}

/// What gets measured, and how often.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentConfig {
    /// Batch NTK and `b/‖K_batch‖₂` at every step.
    #[serde(default = "yes")]
    pub batch_ntk: bool,
    /// Full-training-set NTK cadence `k`.
    #[serde(default = "every_ten")]
    pub full_ntk_every: Option<usize>,
    /// `s` for the `L_≤s / L_>s` split, computed whenever the full NTK is.
    #[serde(default = "five")]
    pub decompose_top: Option<usize>,
    #[serde(default)]
    pub eigenbasis: EigenbasisMode,
    #[serde(default = "one")]
    pub train_loss_every: usize,
    #[serde(default = "every_step")]
    pub validation_every: Option<usize>,
    #[serde(default)]
    pub record_batches: bool,
    /// Also compute the full NTK at lr changes, spike re-descents and loss
    /// increases inside a spike.
    #[serde(default = "yes")]
    pub force_on_events: bool,
}

impl Default for InstrumentConfig {
    fn default() -> Self {
        Self {
            batch_ntk: true,
            full_ntk_every: every_ten(),
            decompose_top: five(),
            eigenbasis: EigenbasisMode::Current,
            train_loss_every: 1,
            validation_every: every_step(),
            record_batches: false,
            force_on_events: true,
        }
    }
}

impl InstrumentConfig {
    /// Only per-step training loss; no kernels.
    pub fn minimal() -> Self {
        Self {
            batch_ntk: false,
            full_ntk_every: None,
            decompose_top: None,
            force_on_events: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.train_loss_every == 0 {
            return Err(Error::config("instrument.train_loss_every", "must be >= 1"));
        }
        if self.full_ntk_every == Some(0) || self.validation_every == Some(0) {
            return Err(Error::config("instrument", "cadences must be >= 1"));
        }
        if let Some(s) = self.decompose_top {
            if s == 0 || s >= n {
                return Err(Error::config("instrument.decompose_top", format!("need 1 <= s < n = {n}")));
            }
        }
        Ok(())
    }
}

fn tau() -> f64 {
    1e-3
}
fn max_iters() -> usize {
    10_000
}
fn blow_up() -> f64 {
    1e6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopConfig {
    /// Converged once the training loss drops below this.
    #[serde(default = "tau")]
    pub loss_threshold: f64,
    #[serde(default = "max_iters")]
    pub max_iters: usize,
    /// Diverged once the training loss exceeds this (or is non-finite).
    #[serde(default = "blow_up")]
    pub divergence_threshold: f64,
}

impl Default for StopConfig {
    fn default() -> Self {
        Self {
            loss_threshold: tau(),
            max_iters: max_iters(),
            divergence_threshold: blow_up(),
        }
    }
}

impl StopConfig {
    pub fn max_iters(max_iters: usize) -> Self {
        Self {
            max_iters,
            ..Self::default()
        }
    }
}

/// Batch positions into the training split.
struct Sampler {
    mode: Sampling,
    full: bool,
    b: usize,
    n: usize,
    rng: ShiftRng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(spec: &OptimizerSpec, n: usize) -> Self {
        let b = spec.effective_batch(n);
        let full = spec.kind == OptimizerKind::Gd || (b >= n && spec.sampling == Sampling::Permutation);
        Self {
            mode: spec.sampling,
            full,
            b,
            n,
            rng: ShiftRng::new(spec.sampler_seed),
            order: Vec::new(),
            cursor: n,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.full {
            return (0..self.n).collect();
        }
        match self.mode {
            Sampling::WithReplacement => (0..self.b).map(|_| self.rng.below(self.n)).collect(),
            Sampling::Permutation => {
                if self.cursor >= self.n {
                    self.order = self.rng.permutation(self.n);
                    self.cursor = 0;
                }
                let end = (self.cursor + self.b).min(self.n);
                let batch = self.order[self.cursor..end].to_vec();
                self.cursor = end;
                batch
            }
        }
    }
}

/// Full-set measurements at one step.
struct FullKernel {
    norm: f64,
    split: Option<(f64, f64)>,
}

struct Loop<'a> {
    model: Mlp,
    train: &'a Part,
    validation: Option<&'a Part>,
    instrument: &'a InstrumentConfig,
    frozen_basis: Option<EigenBasis>,
    /// Last full-batch top NTK eigenvector, the warm start for the next one.
    top_vector: Option<Vec<f64>>,
}

impl Loop<'_> {
    fn full_kernel(&mut self, residual: Option<&[f64]>) -> Result<(FullKernel, Vec<f64>)> {
        let trace = self.model.trace(self.train.x.view());
        let k = gram_from_trace(&self.model, &trace, DEFAULT_BLOCK_ROWS);
        let outputs = trace.out.to_vec();
        let norm = spectral_norm(&k);
        let split = match self.instrument.decompose_top {
            None => None,
            Some(s) => {
                let owned;
                let r = match residual {
                    Some(r) => r,
                    None => {
                        owned = outputs.iter().zip(&self.train.y).map(|(f, y)| f - y).collect::<Vec<_>>();
                        &owned
                    }
                };
                let basis = match self.instrument.eigenbasis {
                    EigenbasisMode::Current => sym_eigen(&k)?,
                    EigenbasisMode::FrozenAtInit => match &self.frozen_basis {
                        Some(b) => b.clone(),
                        None => {
                            let b = sym_eigen(&k)?;
                            self.frozen_basis = Some(b.clone());
                            b
                        }
                    },
                };
                let d = decompose_residual(r, &basis, s)?;
                Some((d.loss_top, d.loss_rest))
            }
        };
        Ok((FullKernel { norm, split }, outputs))
    }

    fn train_loss(&self) -> Result<f64> {
        Ok(mean_squared_residual(&self.model.predict(&self.train.x)?, &self.train.y))
    }

    fn validation_loss(&self) -> Result<Option<f64>> {
        match self.validation {
            Some(v) => Ok(Some(mean_squared_residual(&self.model.predict(&v.x)?, &v.y))),
            None => Ok(None),
        }
    }
}

/// Runs the instrumented loop on the training split of `ds`.
pub fn train(
    model: Mlp,
    ds: &Dataset,
    opt: &OptimizerSpec,
    instrument: &InstrumentConfig,
    stop: &StopConfig,
) -> Result<(Mlp, RunLog)> {
    train_annotated(model, ds, opt, instrument, stop, serde_json::Value::Null)
}

/// [`train`] with a caller-provided value echoed in the log header.
pub fn train_annotated(
    model: Mlp,
    ds: &Dataset,
    opt: &OptimizerSpec,
    instrument: &InstrumentConfig,
    stop: &StopConfig,
    extra: serde_json::Value,
) -> Result<(Mlp, RunLog)> {
    let train_part = ds.train();
    let n = train_part.len();
    if n == 0 {
        return Err(Error::contract("training split is empty"));
    }
    model.check_dim(ds.d())?;
    opt.validate(n)?;
    instrument.validate(n)?;
    let val_part = ds.validation();
    let header = RunHeader {
        format_version: RUNLOG_FORMAT_VERSION,
        model: model.config().clone(),
        optimizer: opt.clone(),
        instrument: instrument.clone(),
        stop: *stop,
        provenance: ds.provenance().clone(),
        n_train: n,
        seeds: Seeds {
            model: model.config().seed,
            sampler: opt.sampler_seed,
        },
        extra,
    };

    let mut lp = Loop {
        model,
        train: &train_part,
        validation: (!val_part.is_empty()).then_some(&val_part),
        instrument,
        frozen_basis: None,
        top_vector: None,
    };
    let mut sampler = Sampler::new(opt, n);
    let mut state = OptimizerState::new(opt.kind, opt.epsilon, lp.model.param_count());
    let mut tracker = SpikeTracker::default();
    let mut steps: Vec<StepRecord> = Vec::new();
    let train_ids = &ds.split().train;

    let (auto_multiplier, auto_cooldown, auto_max) = match opt.schedule {
        Schedule::AutoCatapult {
            multiplier,
            cooldown,
            max_raises,
            ..
        } => (Some(multiplier), cooldown, max_raises),
        _ => (None, 0, 0),
    };
    let mut auto_lr = opt.schedule.initial_lr();
    let mut raises = 0usize;
    // After a failed raise check, further checks wait for cadence steps.
    let mut auto_checked_since_close = false;
    let mut previous_lr: Option<f64> = None;

    let (status, final_loss) = 'run: {
        for t in 0..=stop.max_iters {
            let scheduled_lr = if auto_multiplier.is_some() {
                auto_lr
            } else {
                opt.schedule.lr_at(t)
            };
            let batch = sampler.next();
            let full_batch = sampler.full;
            let batch_x = if full_batch {
                None
            } else {
                Some(train_part.x.select_rows(&batch))
            };
            let batch_y: Vec<f64> = if full_batch {
                train_part.y.clone()
            } else {
                batch.iter().map(|&i| train_part.y[i]).collect()
            };
            let bx: &DenseMatrix = batch_x.as_ref().unwrap_or(&train_part.x);
            let trace = lp.model.trace(bx.view());
            let residual: Vec<f64> = trace.out.iter().zip(&batch_y).map(|(f, y)| f - y).collect();
            let batch_loss = residual.iter().map(|r| r * r).sum::<f64>() / batch.len() as f64;

            let mut full_norm: Option<f64> = None;
            let mut batch_crit: Option<f64> = None;
            if instrument.batch_ntk && batch_loss.is_finite() {
                let norm = if batch.len() >= MATRIX_FREE_MIN_ROWS {
                    let start = if full_batch { lp.top_vector.as_deref() } else { None };
                    let (norm, v) = ntk_top_eigenpair(&lp.model, &trace, start);
                    if full_batch {
                        lp.top_vector = Some(v);
                    }
                    norm
                } else {
                    spectral_norm(&gram_from_trace(&lp.model, &trace, DEFAULT_BLOCK_ROWS))
                };
                batch_crit = Some(critical_lr_from_norm(batch.len(), norm));
                if full_batch {
                    full_norm = Some(norm);
                }
            }

            let blown = !batch_loss.is_finite() || batch_loss > stop.divergence_threshold;
            let is_change = opens_window(&opt.schedule, t, scheduled_lr, previous_lr);
            let need_loss = t % instrument.train_loss_every == 0
                || t == stop.max_iters
                || is_change
                || blown
                || auto_multiplier.is_some();
            let train_loss = if full_batch {
                Some(batch_loss)
            } else if need_loss {
                Some(lp.train_loss()?)
            } else {
                None
            };

            if let Some(l) = train_loss {
                if !l.is_finite() || l > stop.divergence_threshold {
                    if let Some(last) = steps.last_mut() {
                        last.flags.diverged = true;
                        if last.train_loss.is_some() {
                            last.flags.loss_increased = true;
                        }
                    }
                    break 'run (TerminalStatus::Diverged, l);
                }
                if let Some(last) = steps.last_mut() {
                    if last.iteration + 1 == t {
                        if let Some(prev) = last.train_loss {
                            last.flags.loss_increased = l > prev;
                        }
                    }
                }
                let raises_pending = auto_multiplier.is_some() && raises < auto_max;
                if l < stop.loss_threshold && !opt.schedule.pending_changes_after(t) && !raises_pending {
                    break 'run (TerminalStatus::Converged, l);
                }
            }
            if t == stop.max_iters {
                let l = train_loss.expect("loss evaluated at the last iteration");
                break 'run (TerminalStatus::MaxIters, l);
            }

            let mut increased = false;
            let mut obs = Default::default();
            if let Some(l) = train_loss {
                increased = steps.last().and_then(|s| s.train_loss).is_some_and(|p| l > p);
                obs = tracker.observe(t, l);
            }
            let cadence_due = instrument.full_ntk_every.is_some_and(|k| t % k == 0);

            let mut lr = scheduled_lr;
            let mut measured: Option<(FullKernel, Vec<f64>)> = None;
            if let Some(mu) = auto_multiplier {
                if let Some(closed) = tracker.last_redescent() {
                    let eligible = raises < auto_max && t >= closed + auto_cooldown;
                    if eligible && (!auto_checked_since_close || cadence_due) {
                        auto_checked_since_close = true;
                        let m = lp.full_kernel(None)?;
                        let crit = critical_lr_from_norm(n, m.0.norm);
                        if crit > lr {
                            lr = mu * crit;
                            auto_lr = lr;
                            raises += 1;
                            auto_checked_since_close = false;
                        }
                        measured = Some(m);
                    }
                }
            }
            let change = opens_window(&opt.schedule, t, lr, previous_lr);
            if change {
                tracker.open(t, lr, train_loss.expect("loss evaluated at lr changes"));
            }
            let forced = instrument.force_on_events && (change || obs.closed_now || (obs.in_spike && increased));
            if measured.is_none() && (cadence_due || forced) {
                let r = full_batch.then_some(residual.as_slice());
                measured = Some(lp.full_kernel(r)?);
            }
            let (mut loss_top, mut loss_rest) = (None, None);
            if let Some((fk, _)) = &measured {
                full_norm = Some(fk.norm);
                if let Some((top, rest)) = fk.split {
                    loss_top = Some(top);
                    loss_rest = Some(rest);
                }
            }

            let validation_loss = match instrument.validation_every {
                Some(k) if t % k == 0 => lp.validation_loss()?,
                _ => None,
            };

            let coeffs: Vec<f64> = residual.iter().map(|r| 2.0 * r / batch.len() as f64).collect();
            let grad = lp.model.weighted_param_gradient(&trace, &coeffs);
            drop(trace);

            steps.push(StepRecord {
                iteration: t,
                lr,
                train_loss,
                batch_loss,
                eta_crit_batch: batch_crit,
                spectral_norm_full: full_norm,
                loss_top,
                loss_rest,
                validation_loss,
                flags: EventFlags {
                    lr_exceeds_crit: batch_crit.is_some_and(|c| lr - c > super::events::DEFAULT_EVENT_EPSILON),
                    ..EventFlags::default()
                },
                batch_indices: instrument
                    .record_batches
                    .then(|| batch.iter().map(|&i| train_ids[i]).collect()),
            });
            previous_lr = Some(lr);
            state.step(lp.model.params_mut(), &grad, lr);
        }
        unreachable!("the loop always breaks at max_iters")
    };

    let final_validation_loss = if status == TerminalStatus::Diverged {
        None
    } else {
        lp.validation_loss()?
    };
    let terminal = TerminalRecord {
        status,
        iterations: steps.len(),
        final_train_loss: final_loss,
        final_validation_loss,
    };
    Ok((
        lp.model,
        RunLog {
            header,
            steps,
            terminal,
        },
    ))
}

/// One full-batch gradient step at rate `lr`; returns the loss before it.
pub fn gd_step(model: &mut Mlp, x: &DenseMatrix, y: &[f64], lr: f64) -> Result<f64> {
    let (loss, g) = model.loss_and_gradient(x, y)?;
    for (w, gi) in model.params_mut().iter_mut().zip(&g) {
        *w -= lr * gi;
    }
    Ok(loss)
}
