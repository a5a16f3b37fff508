use std::path::Path;
use std::process::{Command, Output};

use catapult_core::experiment::{DataConfig, ExperimentConfig, SplitSizes};
use catapult_core::trainer::StopConfig;
use catapult_core::{DenseMatrix, Mlp, MlpConfig, OptimizerSpec, TargetFunction};

fn catapult(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catapult"))
        .args(args)
        .env("CATAPULT_OUT", out)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no `{key}` line in:\n{text}"))
        .to_string()
}

fn small_data(d: usize) -> DataConfig {
    DataConfig::synthetic(TargetFunction::Rank2, 40, d, 0.1, 3).with_split(SplitSizes {
        train: 24,
        validation: 8,
        test: 8,
        seed: 1,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

#[test]
fn generate_writes_reproducible_csv_and_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("data.json");
    write_json(&cfg, &small_data(4));
    let mut hashes = Vec::new();
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let o = catapult(&["generate", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()], tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
        let text = stdout(&o);
        hashes.push(field(&text, "content_hash"));
        assert!(Path::new(&field(&text, "provenance")).exists());
        bytes.push(std::fs::read(field(&text, "csv")).unwrap());
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_eq!(bytes[0], bytes[1]);

    let reseeded = tmp.path().join("c");
    let o = catapult(
        &["generate", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", reseeded.to_str().unwrap()],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(field(&stdout(&o), "content_hash"), hashes[0]);
}

#[test]
fn train_writes_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let mut exp = ExperimentConfig::new("cli-train", small_data(4), MlpConfig::two_layer(4, 16, 0), OptimizerSpec::gd(0.5));
    exp.stop = StopConfig::max_iters(500);
    let cfg = tmp.path().join("exp.json");
    std::fs::write(&cfg, exp.to_json().unwrap()).unwrap();
    let dir = tmp.path().join("run");
    let o = catapult(
        &["train", "--config", cfg.to_str().unwrap(), "--max-iters", "20", "--seed", "4", "--out", dir.to_str().unwrap()],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["run.jsonl", "run.csv", "checkpoint.json", "summary.json"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let lines = std::fs::read_to_string(dir.join("run.jsonl")).unwrap();
    assert!(lines.lines().count() >= 20);
    Mlp::load(&dir.join("checkpoint.json")).unwrap();
}

#[test]
fn config_errors_exit_nonzero_with_the_offending_field() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = ExperimentConfig::new("bad", small_data(4), MlpConfig::two_layer(4, 8, 0), OptimizerSpec::gd(0.1));
    let mut value: serde_json::Value = serde_json::from_str(&exp.to_json().unwrap()).unwrap();
    value["learning_rate_typo"] = serde_json::json!(1.0);
    let cfg = tmp.path().join("bad.json");
    write_json(&cfg, &value);
    let o = catapult(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate_typo"), "{}", stderr(&o));

    let o = catapult(&["train", "--config", tmp.path().join("missing.json").to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(1));

    let o = catapult(&["suite", "no_such_suite"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

/// A linear checkpoint whose weight vector is e1, plus a dataset CSV of dimension `d`.
fn linear_fixture(dir: &Path, d: usize) -> (String, String) {
    let mut model = Mlp::init(MlpConfig::linear(d, 0)).unwrap();
    for (i, v) in model.output_weights_mut().iter_mut().enumerate() {
        *v = if i == 0 { 1.0 } else { 0.0 };
    }
    let ckpt = dir.join("linear.json");
    model.save(&ckpt).unwrap();
    let cfg = dir.join("data.json");
    write_json(&cfg, &small_data(d));
    let o = catapult(&["generate", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    (ckpt.to_str().unwrap().to_string(), field(&stdout(&o), "csv"))
}

#[test]
fn agop_of_linear_model_aligns_with_its_direction() {
    let tmp = tempfile::tempdir().unwrap();
    let (ckpt, data) = linear_fixture(tmp.path(), 4);
    let reference = tmp.path().join("ref.csv");
    DenseMatrix::from_diag(&[1.0, 0.0, 0.0, 0.0]).write_csv(&reference).unwrap();
    let out = tmp.path().join("agop");
    let o = catapult(
        &["agop", "--checkpoint", &ckpt, "--data", &data, "--reference", reference.to_str().unwrap(), "--out", out.to_str().unwrap()],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let align: f64 = field(&text, "alignment").parse().unwrap();
    assert!((align - 1.0).abs() < 1e-12, "{align}");
    assert_eq!(field(&text, "numerical_rank"), "1");
    for f in ["agop.csv", "agop_crop.csv", "agop_report.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    let o = catapult(&["agop", "--checkpoint", &ckpt, "--data", &data, "--target", "rank2"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let align: f64 = field(&stdout(&o), "alignment").parse().unwrap();
    assert!((0.0..=1.0).contains(&align));

    let o = catapult(&["agop", "--checkpoint", &ckpt, "--data", &data], tmp.path());
    assert!(!o.status.success());
}

#[test]
fn agop_rejects_mismatched_dimensions() {
    let tmp = tempfile::tempdir().unwrap();
    let (ckpt, _) = linear_fixture(tmp.path(), 4);
    let other = tmp.path().join("wide");
    std::fs::create_dir_all(&other).unwrap();
    let (_, wide_data) = linear_fixture(&other, 6);
    let o = catapult(&["agop", "--checkpoint", &ckpt, "--data", &wide_data, "--target", "rank2"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("d = 4") && err.contains("d = 6"), "{err}");
}

#[test]
fn ntk_dump_matches_the_linear_kernel() {
    let tmp = tempfile::tempdir().unwrap();
    let (ckpt, data) = linear_fixture(tmp.path(), 4);
    let out = tmp.path().join("ntk");
    let o = catapult(&["ntk-dump", "--checkpoint", &ckpt, "--data", &data, "--out", out.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lambda: f64 = field(&text, "lambda_max").parse().unwrap();
    let eta: f64 = field(&text, "eta_crit_ntk").parse().unwrap();

    let x = catapult_core::data::load_csv(Path::new(&data)).unwrap().x().clone();
    let gram = x.matmul(&x.transpose()).unwrap().scale(0.25);
    let expected = catapult_core::linalg::sym_eigen(&gram).unwrap().values[0];
    assert!((lambda - expected).abs() <= 1e-10 * expected, "{lambda} vs {expected}");
    assert!((eta - x.rows() as f64 / lambda).abs() <= 1e-10 * eta);
    let k = DenseMatrix::read_csv(&out.join("ntk.csv")).unwrap();
    assert_eq!(k.shape(), (x.rows(), x.rows()));
    let spectrum = std::fs::read_to_string(out.join("spectrum.csv")).unwrap();
    assert!(spectrum.lines().count() >= x.rows());
}
