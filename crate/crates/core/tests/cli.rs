use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nigp_tree::cli::TrainReport;
use nigp_tree::data::{load_features, write_features, DataFormat, FeatureDataset};

fn nigp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nigp")).args(args).current_dir(dir).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, epochs: usize, extra_model: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        format!(
            r#"task = "blobs"
seed = 4

[data]
train = "train.csv"
test = "test.csv"

[model]
kernel = "rbf"
inducing = 2
epochs = {epochs}
{extra_model}

[output]
model = "model.json"
report = "report.json"
"#
        ),
    )
    .unwrap();
    path
}

/// Separated blobs split into train.csv / test.csv inside a fresh directory.
fn workspace(separation: f64) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&nigp(
        &[
            "synth",
            "--out",
            "train.csv",
            "--test-out",
            "test.csv",
            "--separation",
            &separation.to_string(),
            "--seed",
            "2",
        ],
        dir.path(),
    ));
    dir
}

fn accuracy_line(stdout: &str) -> f64 {
    stdout.lines().find_map(|l| l.strip_prefix("accuracy")).unwrap().trim().parse().unwrap()
}

#[test]
fn train_writes_model_and_monotone_report() {
    let dir = workspace(6.0);
    write_config(dir.path(), 15, "");
    ok(&nigp(&["train", "--config", "run.toml"], dir.path()));
    assert!(dir.path().join("model.json").exists());
    let report: TrainReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report.epochs.len(), 15);
    for w in report.epochs.windows(2) {
        assert!(w[1].elbo >= w[0].elbo - 1e-8);
    }
    assert!(report.train_seconds > 0.0);
    assert!(report.test.unwrap().metrics.accuracy >= 0.9);
}

#[test]
fn zero_epochs_fails_without_writing_a_model() {
    let dir = workspace(6.0);
    write_config(dir.path(), 0, "");
    let out = nigp(&["train", "--config", "run.toml"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));
    assert!(!dir.path().join("model.json").exists());
}

#[test]
fn echoed_config_reproduces_the_model() {
    let dir = workspace(6.0);
    write_config(dir.path(), 5, "kmeans_iters = 7");
    ok(&nigp(&["train", "--config", "run.toml"], dir.path()));
    let first = fs::read(dir.path().join("model.json")).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    fs::write(dir.path().join("echo.json"), report["config"].to_string()).unwrap();
    fs::remove_file(dir.path().join("model.json")).unwrap();
    ok(&nigp(&["train", "--config", "echo.json"], dir.path()));
    assert_eq!(fs::read(dir.path().join("model.json")).unwrap(), first);
}

#[test]
fn eval_on_separated_training_data_is_perfect() {
    let dir = workspace(12.0);
    write_config(dir.path(), 20, "");
    ok(&nigp(&["train", "--config", "run.toml"], dir.path()));
    let stdout = ok(&nigp(&["eval", "--model", "model.json", "--data", "train.csv"], dir.path()));
    assert_eq!(accuracy_line(&stdout), 1.0);
    assert!(stdout.contains("ts(s)"));
}

#[test]
fn predict_file_is_consistent_with_eval() {
    let dir = workspace(6.0);
    write_config(dir.path(), 10, "");
    ok(&nigp(&["train", "--config", "run.toml"], dir.path()));
    ok(&nigp(&["predict", "--model", "model.json", "--data", "test.csv", "--out", "pred.csv"], dir.path()));
    let eval =
        ok(&nigp(&["eval", "--model", "model.json", "--data", "test.csv", "--report", "metrics.json"], dir.path()));
    let test = load_features(&dir.path().join("test.csv"), DataFormat::Csv).unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join("pred.csv")).unwrap();
    let mut hits = 0;
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.unwrap();
        let label: usize = rec[0].parse().unwrap();
        let p: Vec<f64> = rec.iter().skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let best = (0..3).fold(0, |b, c| if p[c] > p[b] { c } else { b });
        assert_eq!(best, label);
        hits += usize::from(label == test.labels[i]);
        rows += 1;
    }
    assert_eq!(rows, test.n());
    assert_eq!(hits as f64 / rows as f64, accuracy_line(&eval));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["metrics"]["accuracy"].as_f64().unwrap(), accuracy_line(&eval));
}

#[test]
fn permuted_rows_give_identical_metrics() {
    let dir = workspace(6.0);
    write_config(dir.path(), 5, "");
    ok(&nigp(&["train", "--config", "run.toml"], dir.path()));
    let test = load_features(&dir.path().join("test.csv"), DataFormat::Csv).unwrap();
    let order: Vec<usize> = (0..test.n()).rev().collect();
    write_features(&dir.path().join("perm.csv"), &test.select(&order), DataFormat::Csv).unwrap();
    let a = ok(&nigp(&["eval", "--model", "model.json", "--data", "test.csv"], dir.path()));
    let b = ok(&nigp(&["eval", "--model", "model.json", "--data", "perm.csv"], dir.path()));
    let strip = |s: &str| s.lines().filter(|l| !l.starts_with("ts(s)")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn single_class_test_file_warns() {
    let dir = workspace(6.0);
    write_config(dir.path(), 5, "");
    ok(&nigp(&["train", "--config", "run.toml"], dir.path()));
    let test = load_features(&dir.path().join("test.csv"), DataFormat::Csv).unwrap();
    let ones: Vec<usize> = (0..test.n()).filter(|&i| test.labels[i] == 1).collect();
    let subset = test.select(&ones);
    let single = FeatureDataset::new(subset.features, subset.labels, 2, None).unwrap();
    write_features(&dir.path().join("single.csv"), &single, DataFormat::Csv).unwrap();
    let out = nigp(&["eval", "--model", "model.json", "--data", "single.csv"], dir.path());
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn dimension_mismatch_names_both_values() {
    let dir = workspace(6.0);
    write_config(dir.path(), 3, "");
    ok(&nigp(&["train", "--config", "run.toml"], dir.path()));
    ok(&nigp(&["synth", "--dim", "5", "--out", "five.csv"], dir.path()));
    let out = nigp(&["eval", "--model", "model.json", "--data", "five.csv"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("d=8") && err.contains("d=5"), "{err}");
}

#[test]
fn class_count_mismatch_names_both_values() {
    let dir = workspace(6.0);
    write_config(dir.path(), 3, "");
    ok(&nigp(&["train", "--config", "run.toml"], dir.path()));
    ok(&nigp(&["synth", "--classes", "5", "--out", "five.csv"], dir.path()));
    let out = nigp(&["eval", "--model", "model.json", "--data", "five.csv"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("C=5") && err.contains("C=3"), "{err}");
}

#[test]
fn synth_packed_matches_csv() {
    let dir = tempfile::tempdir().unwrap();
    ok(&nigp(&["synth", "--seed", "9", "--out", "a.csv"], dir.path()));
    ok(&nigp(&["synth", "--seed", "9", "--out", "a.ngpt"], dir.path()));
    let a = load_features(&dir.path().join("a.csv"), DataFormat::Csv).unwrap();
    let b = load_features(&dir.path().join("a.ngpt"), DataFormat::Packed).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n(), 180);
}

#[test]
fn bad_thread_setting_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_nigp"))
        .args(["synth", "--out", "x.csv"])
        .env("NIGP_THREADS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!dir.path().join("x.csv").exists());
}
