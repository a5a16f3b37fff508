//! JSON experiment configs, run artifacts and the canned multi-run suites.
//!
//! A run directory holds `run.jsonl`, `run.csv`, `checkpoint.json` and
//! `summary.json`, each embedding the resolved config and seeds, plus a
//! `meta.json` sidecar with the timestamp and host. Everything except the
//! sidecar is byte-identical across reruns of the same config.

mod config;
mod suites;

pub use config::{
    generate_dataset_files, reference_matrix, resolve_output_dir, run_experiment, sub_seed, target_egop,
    write_run_outputs, write_sidecar, AgopInputs, DataConfig, DataSource, DatasetFiles, ExperimentConfig,
    RunOutcome, RunSummary, SplitSizes, OUTPUT_ROOT_ENV,
};
pub use suites::{
    batch_sweep_sizes, catapult_setup, crit_gap, crit_widths, exact_match_setup, exact_match_stats,
    multi_catapult_metrics, multi_catapult_schedule, optimizer_grid, per_sample_critical_rates, rate_between,
    run_suite, suite_output_dir, ExactMatchStats, Suite, SuiteOptions, SuiteReport, SuiteRow, SuiteRun,
    DIVERGENCE_WINDOW, MULTI_CATAPULT_PLAN,
};
