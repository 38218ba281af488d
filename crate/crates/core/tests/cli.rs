use std::path::Path;
use std::process::{Command, Output};

use cfsense::io::SyntheticSpec;

fn cfsense(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cfsense"));
    cmd.args(args);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, body: serde_json::Value) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, body.to_string()).unwrap();
    path
}

fn small_law() -> serde_json::Value {
    serde_json::json!({
        "data": {"synthetic": SyntheticSpec::law_school(200, 0.5, 1)},
        "selection": {"degree_grid": [1], "predictor_degree_grid": [1], "baseline_degree_grid": [1]},
        "maxcfu": {"budgets": [0.3], "optimizer": {"iterations": 5}},
        "seed": 1,
    })
}

#[test]
fn selftest_passes() {
    let out = cfsense(&["selftest"], None);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{text}");
    assert!(text.lines().skip(1).all(|l| l.contains("PASS")), "{text}");
}

#[test]
fn grid_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), small_law());
    let out_dir = dir.path().join("out");
    let out = cfsense(
        &["run", "--tool", "grid", "--p-grid", "-0.5:0.5:5", "--out", out_dir.to_str().unwrap()],
        Some(&config),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let curve = std::fs::read_to_string(out_dir.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("p,cfu,objective,warn"));
    assert_eq!(curve.lines().count(), 6);
    let preds = std::fs::read_to_string(out_dir.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().next(), Some("id,y,ŷ_cf,ŷ_uc,ŷ_buc"));
    assert_eq!(preds.lines().count(), 201);
    assert!(out_dir.join("model_a.json").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["tool"], "grid");
    assert_eq!(summary["config"]["grid"]["p_grid"].as_array().unwrap().len(), 5);
    assert_eq!(summary["config"]["selection"]["folds"], 5);
    assert!(summary["maxcfu"].is_null());
}

#[test]
fn maxcfu_run_writes_one_trace_per_budget() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), small_law());
    let out_dir = dir.path().join("out");
    let out = cfsense(
        &["run", "--tool", "maxcfu", "--budgets", "0.2:0.4:2", "--seed", "3", "--out", out_dir.to_str().unwrap()],
        Some(&config),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for b in ["0.2", "0.4"] {
        let trace = std::fs::read_to_string(out_dir.join(format!("trace_{b}.csv"))).unwrap();
        assert_eq!(trace.lines().next(), Some("iter,cfu,grad_norm,min_eig"));
        assert_eq!(trace.lines().count(), 6);
    }
    assert!(!out_dir.join("curve.csv").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["seed"], 3);
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = small_law();
    body["maxcfu"]["optimizer"]["learning_rate"] = serde_json::json!("fast");
    let config = write_config(dir.path(), body);
    let out = cfsense(&["run"], Some(&config));
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("maxcfu.optimizer.learning_rate"), "{err}");
}

#[test]
fn grid_on_three_features_fails_but_keeps_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        serde_json::json!({
            "data": {"synthetic": SyntheticSpec::nhs(150, 0.5, 1)},
            "selection": {"degree_grid": [1], "predictor_degree_grid": [1], "baseline_degree_grid": [1]},
            "tool": "grid",
            "seed": 1,
        }),
    );
    let out_dir = dir.path().join("out");
    let out = cfsense(&["run", "--out", out_dir.to_str().unwrap()], Some(&config));
    assert!(!out.status.success());
    assert!(out_dir.join("summary.json").exists());
    assert!(out_dir.join("predictions.csv").exists());
    assert!(String::from_utf8(out.stderr).unwrap().contains("3 features"));
}
