//! Optimizers, learning-rate schedules and the instrumented training loop.
//!
//! [`train`] runs mini-batch training with MSE and records one [`StepRecord`]
//! per executed update. Each record measures the weights *before* its update,
//! so `ΔLᵗ` for step `t` is the next record's loss (or the terminal loss) minus
//! its own. The [`events`] module turns finished logs into catapult counts,
//! match rates and spike windows.

pub mod events;
mod multi;
mod optimizer;
mod record;
mod schedule;
mod train;

pub use events::{
    best_validation_iteration, detect_catapult_events, match_rate, match_rate_above, summarize_catapults,
    window_localization, CatapultEvents, CatapultRecord, CatapultSummary, Horizon, LocalizationRatios, SpikeWindow,
    DEFAULT_EVENT_EPSILON,
};
pub use multi::{cyclical_run, replay_schedule, run_multi_catapult, staged_raise_schedule, StagedRaise};
pub use optimizer::{OptimizerKind, OptimizerSpec, OptimizerState, Sampling, DEFAULT_EPSILON};
pub use record::{EventFlags, RunHeader, RunLog, Seeds, StepRecord, TerminalRecord, TerminalStatus, RUNLOG_FORMAT_VERSION};
pub use schedule::{Schedule, DEFAULT_AUTO_COOLDOWN, DEFAULT_AUTO_MULTIPLIER};
pub use train::{gd_step, train, train_annotated, EigenbasisMode, InstrumentConfig, StopConfig};


#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split, Dataset, TargetFunction};
    use crate::kernel::{critical_lr_ntk, ntk_matrix};
    use crate::network::{Mlp, MlpConfig};

    fn linear_setup() -> (Mlp, Dataset, f64) {
        let ds = generate_synthetic(TargetFunction::Rank2, 16, 20, 0.0, 3).unwrap();
        let model = Mlp::init(MlpConfig::linear(20, 1)).unwrap();
        // The linear model can interpolate 16 points in 20 dimensions.
        let crit = critical_lr_ntk(&ntk_matrix(&model, ds.x()).unwrap(), 16).unwrap();
        (model, ds, crit)
    }

    fn small_net() -> (Mlp, Dataset) {
        let ds = generate_synthetic(TargetFunction::Rank2, 48, 5, 0.1, 1).unwrap();
        let ds = split(ds, 32, 8, 8, 2).unwrap();
        (Mlp::init(MlpConfig::two_layer(5, 64, 4)).unwrap(), ds)
    }

    #[test]
    fn linear_gd_below_critical_converges_monotonically() {
        let (model, ds, crit) = linear_setup();
        let stop = StopConfig {
            loss_threshold: 1e-8,
            ..StopConfig::max_iters(20_000)
        };
        let (_, log) = train(model, &ds, &OptimizerSpec::gd(0.5 * crit), &InstrumentConfig::default(), &stop).unwrap();
        assert_eq!(log.status(), TerminalStatus::Converged);
        assert!(log.terminal.final_train_loss < 1e-8);
        let curve: Vec<f64> = log.loss_curve().into_iter().map(Option::unwrap).collect();
        assert!(curve.windows(2).all(|w| w[1] <= w[0]));
        assert!(log.steps.iter().all(|s| !s.flags.loss_increased && !s.flags.lr_exceeds_crit));
    }

    #[test]
    fn linear_gd_far_above_critical_diverges() {
        let (model, ds, crit) = linear_setup();
        let (_, log) = train(model, &ds, &OptimizerSpec::gd(2.5 * crit), &InstrumentConfig::default(), &StopConfig::default()).unwrap();
        assert_eq!(log.status(), TerminalStatus::Diverged);
        assert!(log.steps.last().unwrap().flags.diverged);
        assert!(log.steps.iter().all(|s| s.flags.lr_exceeds_crit));
    }

    #[test]
    fn records_satisfy_invariants() {
        let (model, ds) = small_net();
        let instrument = InstrumentConfig {
            full_ntk_every: Some(3),
            decompose_top: Some(4),
            record_batches: true,
            ..InstrumentConfig::default()
        };
        let opt = OptimizerSpec::sgd(8, 0.5, 9);
        let (_, log) = train(model, &ds, &opt, &instrument, &StopConfig::max_iters(40)).unwrap();
        assert_eq!(log.steps.len(), log.terminal.iterations);
        for (i, s) in log.steps.iter().enumerate() {
            assert_eq!(s.iteration, i);
            assert!(s.eta_crit_batch.is_some());
            let batch = s.batch_indices.as_ref().unwrap();
            assert_eq!(batch.len(), 8);
            assert!(batch.iter().all(|b| ds.split().train.contains(b)));
            if let (Some(top), Some(rest)) = (s.loss_top, s.loss_rest) {
                let l = s.train_loss.unwrap();
                assert!(((top + rest) - l).abs() <= 1e-10 * l);
            }
            if i % 3 == 0 {
                assert!(s.spectral_norm_full.is_some());
            }
        }
        // Each epoch of 4 batches covers the 32 training rows exactly once.
        let mut epoch: Vec<usize> = log.steps[..4].iter().flat_map(|s| s.batch_indices.clone().unwrap()).collect();
        epoch.sort_unstable();
        assert_eq!(epoch, ds.split().train);
    }

    #[test]
    fn runs_are_bit_identical() {
        let (model, ds) = small_net();
        let opt = OptimizerSpec::sgd(8, 0.5, 9);
        let a = train(model.clone(), &ds, &opt, &InstrumentConfig::default(), &StopConfig::max_iters(30)).unwrap();
        let b = train(model, &ds, &opt, &InstrumentConfig::default(), &StopConfig::max_iters(30)).unwrap();
        assert_eq!(a.1.to_jsonl().unwrap(), b.1.to_jsonl().unwrap());
        assert_eq!(a.0.params(), b.0.params());
    }

    #[test]
    fn jsonl_and_csv_round_trip() {
        let (model, ds) = small_net();
        let instrument = InstrumentConfig {
            record_batches: true,
            ..InstrumentConfig::default()
        };
        let opt = OptimizerSpec::sgd(16, 0.3, 1);
        let (_, log) = train(model, &ds, &opt, &instrument, &StopConfig::max_iters(12)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        log.write_jsonl(&path).unwrap();
        let back = RunLog::read_jsonl(&path).unwrap();
        assert_eq!(back, log);
        let text = std::fs::read_to_string(&path).unwrap();
        let first_step: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        for key in [
            "iteration",
            "lr",
            "train_loss",
            "batch_loss",
            "eta_crit_batch",
            "spectral_norm_full",
            "loss_top",
            "loss_rest",
            "validation_loss",
            "flags",
        ] {
            assert!(first_step.get(key).is_some(), "missing {key}");
        }
        let csv_path = dir.path().join("run.csv");
        log.write_csv(&csv_path).unwrap();
        let csv_text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv_text.lines().count(), log.steps.len() + 1);
        assert!(csv_text.starts_with("iteration,lr,train_loss,batch_loss,eta_crit_batch"));
    }

    #[test]
    fn non_finite_values_serialize_as_null() {
        let (model, ds, crit) = linear_setup();
        let stop = StopConfig {
            divergence_threshold: f64::INFINITY,
            ..StopConfig::max_iters(100_000)
        };
        let (_, log) = train(model, &ds, &OptimizerSpec::gd(50.0 * crit), &InstrumentConfig::minimal(), &stop).unwrap();
        assert_eq!(log.status(), TerminalStatus::Diverged);
        let text = log.to_jsonl().unwrap();
        assert!(text.lines().last().unwrap().contains("\"final_train_loss\":null"));
    }

    #[test]
    fn with_replacement_sampling_draws_iid() {
        let (model, ds) = small_net();
        let opt = OptimizerSpec::sgd(1, 0.1, 3).with_sampling(Sampling::WithReplacement);
        let instrument = InstrumentConfig {
            record_batches: true,
            ..InstrumentConfig::minimal()
        };
        let (_, log) = train(model, &ds, &opt, &instrument, &StopConfig::max_iters(200)).unwrap();
        let draws: Vec<usize> = log.steps.iter().map(|s| s.batch_indices.as_ref().unwrap()[0]).collect();
        // A permutation would give 32 distinct rows; i.i.d. draws repeat.
        let first: std::collections::BTreeSet<_> = draws[..32].iter().collect();
        assert!(first.len() < 32);
        assert!(draws.iter().all(|d| ds.split().train.contains(d)));
    }

    #[test]
    fn sgd_with_full_batch_equals_gd() {
        let (model, ds) = small_net();
        let instr = InstrumentConfig::minimal();
        let stop = StopConfig::max_iters(15);
        let a = train(model.clone(), &ds, &OptimizerSpec::gd(0.4), &instr, &stop).unwrap();
        let b = train(model, &ds, &OptimizerSpec::sgd(32, 0.4, 77), &instr, &stop).unwrap();
        assert_eq!(a.0.params(), b.0.params());
    }

    #[test]
    fn step_increase_raises_are_measured() {
        let (model, ds) = small_net();
        let opt = OptimizerSpec::gd(0.2).with_schedule(Schedule::StepIncrease {
            initial: 0.2,
            steps: vec![(7, 0.4)],
        });
        let instrument = InstrumentConfig {
            full_ntk_every: Some(100),
            ..InstrumentConfig::default()
        };
        let (_, log, summary) = run_multi_catapult(model, &ds, &opt, &instrument, &StopConfig::max_iters(20)).unwrap();
        assert_eq!(log.steps[7].lr, 0.4);
        assert!(log.steps[7].spectral_norm_full.is_some() && log.steps[7].loss_top.is_some());
        assert_eq!(summary.windows.len(), 2);
        assert_eq!(replay_schedule(&log), opt.schedule);
    }

    #[test]
    fn constant_multi_catapult_equals_train() {
        let (model, ds) = small_net();
        let opt = OptimizerSpec::gd(0.3);
        let instr = InstrumentConfig::default();
        let stop = StopConfig::max_iters(10);
        let (_, a, _) = run_multi_catapult(model.clone(), &ds, &opt, &instr, &stop).unwrap();
        let (_, b) = train(model, &ds, &opt, &instr, &stop).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_basis_mode_runs() {
        let (model, ds) = small_net();
        let instrument = InstrumentConfig {
            eigenbasis: EigenbasisMode::FrozenAtInit,
            full_ntk_every: Some(2),
            ..InstrumentConfig::default()
        };
        let (_, log) = train(model, &ds, &OptimizerSpec::gd(0.3), &instrument, &StopConfig::max_iters(10)).unwrap();
        for s in log.steps.iter().filter(|s| s.loss_top.is_some()) {
            let l = s.train_loss.unwrap();
            assert!(((s.loss_top.unwrap() + s.loss_rest.unwrap()) - l).abs() <= 1e-10 * l);
        }
    }

    #[test]
    fn cyclical_run_requires_cyclical_schedule() {
        let (model, ds) = small_net();
        assert!(cyclical_run(model.clone(), &ds, &OptimizerSpec::gd(0.1), &InstrumentConfig::minimal(), &StopConfig::max_iters(3)).is_err());
        let opt = OptimizerSpec::gd(0.1).with_schedule(Schedule::Cyclical {
            min: 0.05,
            max: 0.2,
            period: 4,
        });
        let (_, log) = cyclical_run(model, &ds, &opt, &InstrumentConfig::minimal(), &StopConfig::max_iters(12)).unwrap();
        for t in 0..8 {
            assert_eq!(log.steps[t].lr, log.steps[t + 4].lr);
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let (model, ds) = small_net();
        let bad = InstrumentConfig {
            train_loss_every: 0,
            ..InstrumentConfig::default()
        };
        assert!(train(model.clone(), &ds, &OptimizerSpec::gd(0.1), &bad, &StopConfig::max_iters(3)).is_err());
        assert!(train(model, &ds, &OptimizerSpec::sgd(100, 0.1, 0), &InstrumentConfig::minimal(), &StopConfig::max_iters(3)).is_err());
    }
}
