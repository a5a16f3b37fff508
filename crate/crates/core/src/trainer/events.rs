//! Post-hoc statistics over run logs: catapult events, match rate, spike windows.

use serde::{Deserialize, Serialize};

use super::record::{RunLog, TerminalStatus};
use super::schedule::Schedule;
use crate::error::{Error, Result};

pub const DEFAULT_EVENT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    /// Steps up to the first iteration with the lowest recorded validation loss.
    BestValidation,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatapultEvents {
    pub event_count: usize,
    pub event_iterations: Vec<usize>,
    /// Runs of consecutive event iterations merged into one.
    pub clustered_count: usize,
    /// Last iteration inside the horizon.
    pub horizon_end: Option<usize>,
}

/// Steps with `lr − η̃_crit(batch) > epsilon` inside the horizon.
///
/// Without any recorded validation loss the best-validation horizon falls back
/// to the whole run.
pub fn detect_catapult_events(log: &RunLog, epsilon: f64, horizon: Horizon) -> Result<CatapultEvents> {
    let end = match horizon {
        Horizon::Full => None,
        Horizon::BestValidation => best_validation_iteration(log),
    };
    let mut iterations = Vec::new();
    for s in &log.steps {
        if end.is_some_and(|e| s.iteration > e) {
            break;
        }
        let crit = s.eta_crit_batch.ok_or_else(|| {
            Error::contract(format!("step {} has no batch critical rate recorded", s.iteration))
        })?;
        if s.lr - crit > epsilon {
            iterations.push(s.iteration);
        }
    }
    let clustered_count = iterations
        .iter()
        .enumerate()
        .filter(|(i, &it)| *i == 0 || iterations[i - 1] + 1 != it)
        .count();
    Ok(CatapultEvents {
        event_count: iterations.len(),
        clustered_count,
        event_iterations: iterations,
        horizon_end: end.or_else(|| log.steps.last().map(|s| s.iteration)),
    })
}

/// First iteration attaining the minimum recorded validation loss.
pub fn best_validation_iteration(log: &RunLog) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for s in &log.steps {
        if let Some(v) = s.validation_loss {
            if v.is_finite() && best.is_none_or(|(b, _)| v < b) {
                best = Some((v, s.iteration));
            }
        }
    }
    best.map(|(_, it)| it)
}

/// Fraction of loss-increasing steps whose rate exceeded the batch critical
/// rate; 1 when the loss never increases.
pub fn match_rate(log: &RunLog) -> Result<f64> {
    match_rate_above(log, 0.0)
}

/// [`match_rate`] counting only steps with `L^{t+1} − L^t > floor`.
pub fn match_rate_above(log: &RunLog, floor: f64) -> Result<f64> {
    let mut increases = 0usize;
    let mut matched = 0usize;
    for (i, s) in log.steps.iter().enumerate() {
        let missing = || Error::contract(format!("step {} lacks the losses match_rate needs", s.iteration));
        let before = s.train_loss.ok_or_else(missing)?;
        let after = log.loss_after(i).ok_or_else(missing)?;
        if after - before > floor {
            increases += 1;
            let crit = s.eta_crit_batch.ok_or_else(missing)?;
            if s.lr > crit {
                matched += 1;
            }
        }
    }
    Ok(if increases == 0 {
        1.0
    } else {
        matched as f64 / increases as f64
    })
}

/// A learning-rate raise (or the start of training) and the loss spike, if
/// any, that follows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeWindow {
    pub start: usize,
    pub lr: f64,
    /// Training loss at the raise iteration, before the first update at `lr`.
    pub pre_spike_loss: f64,
    pub peak_loss: f64,
    pub peak_iteration: usize,
    /// The loss rose above `pre_spike_loss` at some point.
    pub spiked: bool,
    /// First iteration after the spike where the loss is back below `pre_spike_loss`.
    pub redescent: Option<usize>,
}

/// Incremental window bookkeeping shared by the training loop and the
/// post-hoc summary.
#[derive(Debug, Clone, Default)]
pub(crate) struct SpikeTracker {
    pub windows: Vec<SpikeWindow>,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct SpikeObservation {
    pub closed_now: bool,
    pub in_spike: bool,
}

impl SpikeTracker {
    pub fn open(&mut self, t: usize, lr: f64, loss: f64) {
        self.windows.push(SpikeWindow {
            start: t,
            lr,
            pre_spike_loss: loss,
            peak_loss: loss,
            peak_iteration: t,
            spiked: false,
            redescent: None,
        });
    }

    pub fn observe(&mut self, t: usize, loss: f64) -> SpikeObservation {
        let Some(w) = self.windows.last_mut() else {
            return SpikeObservation::default();
        };
        if w.redescent.is_some() {
            return SpikeObservation::default();
        }
        if loss > w.peak_loss {
            w.peak_loss = loss;
            w.peak_iteration = t;
        }
        if loss > w.pre_spike_loss {
            w.spiked = true;
        }
        if w.spiked && loss < w.pre_spike_loss {
            w.redescent = Some(t);
            return SpikeObservation {
                closed_now: true,
                in_spike: false,
            };
        }
        SpikeObservation {
            closed_now: false,
            in_spike: w.spiked,
        }
    }

    /// Iteration at which the latest window re-descended, if it has.
    pub fn last_redescent(&self) -> Option<usize> {
        self.windows.last().and_then(|w| w.redescent)
    }
}

/// Whether an lr change at `t` opens a new spike window.
pub(crate) fn opens_window(schedule: &Schedule, t: usize, lr: f64, previous_lr: Option<f64>) -> bool {
    t == 0 || (!matches!(schedule, Schedule::Cyclical { .. }) && previous_lr.is_some_and(|p| p != lr))
}

/// One raise and what happened to the loss and kernel around it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatapultRecord {
    #[serde(flatten)]
    pub window: SpikeWindow,
    /// `‖K‖₂` at the raise iteration.
    pub spectral_norm_before: Option<f64>,
    /// `‖K‖₂` at the re-descent iteration.
    pub spectral_norm_after: Option<f64>,
    /// `n/‖K‖₂` at the raise iteration.
    pub eta_crit_before: Option<f64>,
}

impl CatapultRecord {
    pub fn is_catapult(&self) -> bool {
        self.window.spiked
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatapultSummary {
    pub windows: Vec<CatapultRecord>,
    pub status: TerminalStatus,
}

impl CatapultSummary {
    pub fn catapults(&self) -> impl Iterator<Item = &CatapultRecord> {
        self.windows.iter().filter(|w| w.is_catapult())
    }

    pub fn catapult_count(&self) -> usize {
        self.catapults().count()
    }
}

/// Rebuilds the raise windows of a run from its log.
pub fn summarize_catapults(log: &RunLog) -> CatapultSummary {
    let schedule = &log.header.optimizer.schedule;
    let n = log.header.n_train;
    let mut tracker = SpikeTracker::default();
    let mut previous_lr = None;
    for s in &log.steps {
        if let Some(loss) = s.train_loss {
            tracker.observe(s.iteration, loss);
            if opens_window(schedule, s.iteration, s.lr, previous_lr) {
                tracker.open(s.iteration, s.lr, loss);
            }
        }
        previous_lr = Some(s.lr);
    }
    let final_iteration = log.terminal.iterations;
    if log.terminal.final_train_loss.is_finite() {
        tracker.observe(final_iteration, log.terminal.final_train_loss);
    }
    let norm_at = |t: usize| log.steps.iter().find(|s| s.iteration == t).and_then(|s| s.spectral_norm_full);
    let windows = tracker
        .windows
        .into_iter()
        .map(|w| {
            let before = norm_at(w.start);
            CatapultRecord {
                spectral_norm_before: before,
                spectral_norm_after: w.redescent.and_then(norm_at),
                eta_crit_before: before.map(|b| crate::kernel::critical_lr_from_norm(n, b)),
                window: w,
            }
        })
        .collect();
    CatapultSummary {
        windows,
        status: log.terminal.status,
    }
}

/// Ratios of the in-window maxima of `L_≤s` and `L_>s` to their values at the
/// window start, over records carrying a decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRatios {
    pub top_max_ratio: f64,
    pub rest_max_ratio: f64,
    pub samples: usize,
}

pub fn window_localization(log: &RunLog, window: &SpikeWindow) -> Option<LocalizationRatios> {
    let end = window.redescent.unwrap_or(usize::MAX);
    let inside: Vec<_> = log
        .steps
        .iter()
        .filter(|s| s.iteration >= window.start && s.iteration <= end)
        .filter_map(|s| Some((s.iteration, s.loss_top?, s.loss_rest?)))
        .collect();
    let &(first_it, top0, rest0) = inside.first()?;
    if first_it != window.start {
        return None;
    }
    let top_max = inside.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let rest_max = inside.iter().map(|x| x.2).fold(f64::NEG_INFINITY, f64::max);
    Some(LocalizationRatios {
        top_max_ratio: top_max / top0,
        rest_max_ratio: rest_max / rest0,
        samples: inside.len(),
    })
}
