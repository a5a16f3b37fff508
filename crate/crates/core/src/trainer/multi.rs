use super::events::{summarize_catapults, CatapultSummary};
use super::optimizer::OptimizerSpec;
use super::record::RunLog;
use super::schedule::Schedule;
use super::train::{train, InstrumentConfig, StopConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{critical_lr_ntk, ntk_matrix};
use crate::network::Mlp;

/// Trains under a raising schedule (`StepIncrease`, `AutoCatapult`, or a
/// degenerate `Constant`) and summarizes every raise window.
pub fn run_multi_catapult(
    model: Mlp,
    ds: &Dataset,
    opt: &OptimizerSpec,
    instrument: &InstrumentConfig,
    stop: &StopConfig,
) -> Result<(Mlp, RunLog, CatapultSummary)> {
    if matches!(opt.schedule, Schedule::Cyclical { .. }) {
        return Err(Error::config("schedule", "multi-catapult runs need a step or automatic schedule"));
    }
    if !instrument.force_on_events {
        return Err(Error::config(
            "instrument.force_on_events",
            "multi-catapult runs measure the kernel at every raise and re-descent",
        ));
    }
    let (model, log) = train(model, ds, opt, instrument, stop)?;
    let summary = summarize_catapults(&log);
    Ok((model, log, summary))
}

/// Plain training under a triangular cyclical schedule.
pub fn cyclical_run(
    model: Mlp,
    ds: &Dataset,
    opt: &OptimizerSpec,
    instrument: &InstrumentConfig,
    stop: &StopConfig,
) -> Result<(Mlp, RunLog)> {
    if !matches!(opt.schedule, Schedule::Cyclical { .. }) {
        return Err(Error::config("schedule", "cyclical_run needs a cyclical schedule"));
    }
    train(model, ds, opt, instrument, stop)
}

/// The piecewise-constant schedule a finished run actually followed, e.g. to
/// replay the raises chosen by `AutoCatapult`.
pub fn replay_schedule(log: &RunLog) -> Schedule {
    let initial = log.steps.first().map_or(log.header.optimizer.schedule.initial_lr(), |s| s.lr);
    let mut steps = Vec::new();
    let mut current = initial;
    for s in log.steps.iter().skip(1) {
        if s.lr != current {
            steps.push((s.iteration, s.lr));
            current = s.lr;
        }
    }
    if steps.is_empty() {
        Schedule::Constant { lr: initial }
    } else {
        Schedule::StepIncrease { initial, steps }
    }
}

/// Plan for [`staged_raise_schedule`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StagedRaise {
    /// Iteration of the first raise.
    pub warmup: usize,
    pub raises: usize,
    /// Each raise sets the rate to `multiplier · η̃_crit` of the weights at that iteration.
    pub multiplier: f64,
    /// Steps between a spike's re-descent and the next raise.
    pub cooldown: usize,
    /// Steps allowed for a spike to re-descend.
    pub budget: usize,
}

/// Builds a `StepIncrease` schedule whose every raise lands above the critical
/// rate measured at that iteration.
///
/// Training is deterministic, so the schedule is found by replaying prefixes:
/// train up to the next raise point, measure `η̃_crit`, append the raise, then
/// continue until the spike it causes has re-descended. The schedule starts
/// from `opt.schedule.initial_lr()`.
pub fn staged_raise_schedule(model: &Mlp, ds: &Dataset, opt: &OptimizerSpec, plan: &StagedRaise) -> Result<Schedule> {
    if !(plan.multiplier > 1.0) {
        return Err(Error::config("multiplier", "must exceed 1"));
    }
    let initial = opt.schedule.initial_lr();
    let train_x = ds.train().x;
    let n = train_x.rows();
    let instrument = InstrumentConfig::minimal();
    let prefix_stop = |max_iters: usize| StopConfig {
        loss_threshold: 0.0,
        max_iters,
        ..StopConfig::default()
    };
    let mut steps: Vec<(usize, f64)> = Vec::new();
    let mut next = plan.warmup;
    for _ in 0..plan.raises {
        let schedule = current(initial, &steps);
        let run_opt = opt.clone().with_schedule(schedule);
        let (at, log) = train(model.clone(), ds, &run_opt, &instrument, &prefix_stop(next))?;
        if log.status() == super::record::TerminalStatus::Diverged {
            return Err(Error::Numerical {
                message: format!("run diverged before the raise at iteration {next}"),
                residual: log.terminal.final_train_loss,
            });
        }
        let crit = critical_lr_ntk(&ntk_matrix(&at, &train_x)?, n)?;
        let rate = plan.multiplier * crit;
        steps.push((next, rate));

        let run_opt = opt.clone().with_schedule(current(initial, &steps));
        let (_, log) = train(model.clone(), ds, &run_opt, &instrument, &prefix_stop(next + plan.budget))?;
        let summary = summarize_catapults(&log);
        let window = summary.windows.iter().find(|w| w.window.start == next);
        match window.and_then(|w| w.window.redescent) {
            Some(r) => next = r + plan.cooldown,
            None => {
                return Err(Error::Numerical {
                    message: format!("spike after the raise at iteration {next} did not re-descend"),
                    residual: log.terminal.final_train_loss,
                })
            }
        }
    }
    Ok(current(initial, &steps))
}

fn current(initial: f64, steps: &[(usize, f64)]) -> Schedule {
    if steps.is_empty() {
        Schedule::Constant { lr: initial }
    } else {
        Schedule::StepIncrease {
            initial,
            steps: steps.to_vec(),
        }
    }
}
