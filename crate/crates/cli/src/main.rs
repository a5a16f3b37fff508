//! `catapult`: run configured training experiments and the canned suites.
//!
//! Exit codes: 0 on success (a diverged `train` run still counts), 1 on any
//! error such as a bad config or unreadable file, 2 when a suite ran but one
//! of its runs broke the suite's expectations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use catapult_core::data::load_csv;
use catapult_core::experiment::{
    generate_dataset_files, resolve_output_dir, run_experiment, run_suite, suite_output_dir, target_egop,
    write_run_outputs, write_sidecar, DataConfig, ExperimentConfig, Suite, SuiteOptions,
};
use catapult_core::kernel::{critical_lr_ntk, ntk_matrix, write_eigenvalues_csv};
use catapult_core::{agop, alignment, DenseMatrix, Mlp, TargetFunction};

const RANK_TOLERANCE: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(name = "catapult", version, about = "Catapult dynamics and AGOP alignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a dataset CSV and its provenance record.
    Generate(GenerateArgs),
    /// Train one configured run and write its logs, checkpoint and summary.
    Train(TrainArgs),
    /// Run one of the canned multi-run suites.
    Suite(SuiteArgs),
    /// Report a checkpoint's AGOP and its alignment with a reference.
    Agop(AgopArgs),
    /// Write a checkpoint's NTK matrix and spectrum on a dataset.
    NtkDump(NtkArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Experiment config, or a bare dataset block (`{"source": ...}`).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; replaces the data and split seeds by their sub-seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// File stem of the written CSV and provenance JSON.
    #[arg(long, default_value = "dataset")]
    stem: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides every sub-seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the config's run name.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Also estimate the Hessian critical rate at initialization.
    #[arg(long)]
    hessian_probe: bool,
}

#[derive(Args, Debug)]
struct SuiteArgs {
    /// table1_batch_sweep, optimizer_sweep, multi_catapult, exact_match,
    /// small_lr_control or crit_lr_validation.
    name: String,
    /// Multiplies sample counts and widths.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Master seed the per-run seeds derive from.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Keep every sub-run's artifacts under `<out>/runs/`.
    #[arg(long)]
    keep_runs: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AgopArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset CSV whose inputs the AGOP averages over.
    #[arg(long)]
    data: PathBuf,
    /// Reference EGOP of a synthetic target (rank2, rank3, rank4, full_rank).
    #[arg(long, conflicts_with = "reference", required_unless_present = "reference")]
    target: Option<String>,
    /// Reference matrix as CSV.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Seed of the Monte-Carlo EGOP estimate for targets without a closed form.
    #[arg(long, default_value_t = 0)]
    egop_seed: u64,
    /// Size of the normalized top-left crop that is also written.
    #[arg(long, default_value_t = 10)]
    crop: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct NtkArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Suite(a) => suite(a),
        Command::Agop(a) => agop_report(a),
        Command::NtkDump(a) => ntk_dump(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let raw = read_json(&a.config)?;
    let (name, data) = if raw.get("dataset").is_some() {
        let cfg: ExperimentConfig = serde_json::from_value(raw).with_context(|| format!("in {}", a.config.display()))?;
        (cfg.name.clone(), cfg.dataset)
    } else {
        let data: DataConfig = serde_json::from_value(raw).with_context(|| format!("in {}", a.config.display()))?;
        ("dataset".to_string(), data)
    };
    let data = match a.seed {
        Some(s) => data.with_master_seed(s),
        None => data,
    };
    let dir = resolve_output_dir(a.out.as_deref(), None, &name);
    let files = generate_dataset_files(&data, &dir, &a.stem)?;
    println!("csv: {}", files.csv.display());
    println!("provenance: {}", files.provenance.display());
    println!("content_hash: {:016x}", files.content_hash);
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.master_seed = Some(s);
    }
    if let Some(n) = a.name {
        cfg.name = n;
    }
    if let Some(m) = a.max_iters {
        cfg.stop.max_iters = m;
    }
    cfg.hessian_probe |= a.hessian_probe;
    let dir = cfg.output_dir(a.out.as_deref());
    let outcome = run_experiment(&cfg)?;
    write_run_outputs(&outcome, &dir)?;
    println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
    println!("outputs: {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn suite(a: SuiteArgs) -> Result<ExitCode> {
    let which: Suite = a.name.parse()?;
    let opts = SuiteOptions {
        scale: a.scale,
        seeds: a.seeds,
        master_seed: a.seed,
        max_epochs: a.max_epochs,
        max_iters: a.max_iters,
        keep_runs: a.keep_runs,
    };
    let dir = suite_output_dir(which, a.out.as_deref());
    let report = run_suite(which, &opts, Some(&dir))?;
    report.write(&dir)?;
    for row in &report.rows {
        println!("{}", serde_json::to_string(row)?);
    }
    println!("outputs: {}", dir.display());
    match &report.failure {
        None => Ok(ExitCode::SUCCESS),
        Some(reason) => {
            eprintln!("suite {which} failed: {reason}");
            Ok(ExitCode::from(2))
        }
    }
}

fn load_pair(checkpoint: &Path, data: &Path) -> Result<(Mlp, DenseMatrix)> {
    let model = Mlp::load(checkpoint)?;
    let ds = load_csv(data)?;
    if ds.d() != model.input_dim() {
        bail!(
            "dimension mismatch: checkpoint expects d = {} but {} has d = {}",
            model.input_dim(),
            data.display(),
            ds.d()
        );
    }
    Ok((model, ds.x().clone()))
}

fn agop_report(a: AgopArgs) -> Result<ExitCode> {
    let (model, x) = load_pair(&a.checkpoint, &a.data)?;
    let d = x.cols();
    let (reference, oracle) = match (&a.target, &a.reference) {
        (Some(t), _) => (target_egop(&TargetFunction::from_name(t)?, d, a.egop_seed)?, json!({ "target": t })),
        (None, Some(p)) => (DenseMatrix::read_csv(p)?, json!({ "reference": p })),
        (None, None) => bail!("either --target or --reference is required"),
    };
    if reference.shape() != (d, d) {
        bail!(
            "dimension mismatch: reference is {}x{} but the inputs have d = {d}",
            reference.rows(),
            reference.cols()
        );
    }
    let g = agop(&model, &x)?;
    let align = alignment(&g, &reference)?;
    let rank = g.numerical_rank(RANK_TOLERANCE)?;
    let dir = resolve_output_dir(a.out.as_deref(), None, "agop");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    g.write_csv(&dir.join("agop.csv"))?;
    g.write_crop_csv(&dir.join("agop_crop.csv"), a.crop.min(d))?;
    let report = json!({
        "checkpoint": a.checkpoint,
        "data": a.data,
        "oracle": oracle,
        "samples": g.sample_count(),
        "alignment": align,
        "trace": g.trace(),
        "numerical_rank": rank,
        "rank_tolerance": RANK_TOLERANCE,
    });
    std::fs::write(dir.join("agop_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    write_sidecar(&dir)?;
    println!("alignment: {align}");
    println!("trace: {}", g.trace());
    println!("numerical_rank: {rank}");
    println!("outputs: {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn ntk_dump(a: NtkArgs) -> Result<ExitCode> {
    let (model, x) = load_pair(&a.checkpoint, &a.data)?;
    let k = ntk_matrix(&model, &x)?;
    let eigen = k.eigen()?;
    let dir = resolve_output_dir(a.out.as_deref(), None, "ntk");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    k.write_csv(&dir.join("ntk.csv"))?;
    write_eigenvalues_csv(&eigen.values, &dir.join("spectrum.csv"))?;
    write_sidecar(&dir)?;
    println!("lambda_max: {}", eigen.values[0]);
    println!("eta_crit_ntk: {}", critical_lr_ntk(&k, x.rows())?);
    println!("outputs: {}", dir.display());
    Ok(ExitCode::SUCCESS)
}
