use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_latentflow"));
    c.env_remove("LATENTFLOW_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const TOY: &str = "dataset = \"toy\"
iterations = 5000
lr = 1e-3
label_noise_std = 0.1
encoder_hidden = [32]
dynamics_hidden = [32, 32]
";

/// A toy model trained once through the binary and shared by the tests.
fn trained_toy() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), &format!("{TOY}out = \"run\"\n"));
        let out = run(&["train", "--config", cfg.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir
    })
    .path()
}

fn run_dir() -> String {
    trained_toy().join("run").to_string_lossy().into_owned()
}

#[test]
fn missing_config_exits_2_naming_path() {
    let out = run(&["train", "--config", "/no/such/config.toml", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/config.toml"));
}

#[test]
fn bad_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "iterashuns = 4\n");
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iterashuns"));
}

#[test]
fn zero_iterations_writes_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "iterations = 0\n");
    let out_dir = dir.path().join("out");
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(out_dir.join("train_log.jsonl")).unwrap(), "");
    assert!(out_dir.join("params.json").is_file());
    assert!(out_dir.join("manifest.json").is_file());
}

#[test]
fn toy_end_to_end_mse() {
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(trained_toy().join("run/manifest.json")).unwrap()).unwrap();
    assert!(manifest["train_metrics"]["mse"].as_f64().unwrap() < 1e-2);

    let log = std::fs::read_to_string(trained_toy().join("run/train_log.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "lr", "flow_loss", "ae_loss", "val_metric"] {
        assert!(first.get(key).is_some(), "log record lacks {key}");
    }
}

#[test]
fn eval_reports_nfe() {
    let dir = run_dir();
    let out = run(&["eval", "--checkpoint", &dir, "--solver", "euler:1"]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["nfe_mean"].as_f64(), Some(1.0));
    assert!(v["mse"].as_f64().unwrap() < 1e-2);

    let out = run(&["eval", "--checkpoint", &dir, "--solver", "dopri5:1e-3,1e-3"]);
    assert!(stdout_json(&out)["nfe_mean"].as_f64().unwrap() >= 7.0);
}

#[test]
fn eval_rejects_bad_solver_and_dims() {
    let dir = run_dir();
    let out = run(&["eval", "--checkpoint", &dir, "--solver", "euler:0"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["eval", "--checkpoint", &dir, "--dataset", "synth"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("(4, 1)") && err.contains("(2, 2)"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn diagnose_writes_report() {
    let dir = run_dir();
    let report_dir = trained_toy().join("diag");
    let out = run(&["diagnose", "--checkpoint", &dir, "--out", report_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    for key in ["disagreement_fraction", "cosine_profile", "knn_accuracy_z0", "nfe_sweep"] {
        assert!(v.get(key).is_some(), "report lacks {key}");
    }
    assert!(v["disagreement_fraction"].as_f64().unwrap() < 0.01);
    let on_disk: Value =
        serde_json::from_str(&std::fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(on_disk, v);

    let csv = std::fs::read_to_string(report_dir.join("cosine_profile.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 21);
    for row in rows {
        let c: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!(c.is_finite());
    }
    assert!(report_dir.join("nfe_sweep.csv").is_file());
}

#[test]
fn compare_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let out_dir = dir.path().join("cmp");
    let out = run(&["compare", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    let row = |name: &str| {
        v["rows"]
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["model"] == name)
            .cloned()
            .unwrap()
    };
    assert_eq!(row("latent_fm")["train_nfe_per_step"], 1);
    assert_eq!(row("node")["train_nfe_per_step"], 8);
    assert!(row("latent_fm")["train_mse"].as_f64().unwrap() < 1e-2);
    assert!(row("direct_fm")["train_mse"].as_f64().unwrap() > 0.1);
    assert!(out_dir.join("compare.txt").is_file());
    assert!(out_dir.join("compare_timing.json").is_file());
}

#[test]
fn seeded_json_outputs_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "iterations = 200\nencoder_hidden = [8]\ndynamics_hidden = [8]\n");
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(&["train", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success());
        files.push(
            ["params.json", "manifest.json", "train_log.jsonl"].map(|f| std::fs::read(out_dir.join(f)).unwrap()),
        );
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn toy_prints_csv() {
    let out = run(&["toy"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("x0,x1,y0,y1"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn unknown_subcommand_exits_2() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}
