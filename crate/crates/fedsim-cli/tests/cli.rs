//! End-to-end checks of the `fedsim` binary: output files, exit codes,
//! overrides, and determinism across reruns and worker counts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fedsim"));
    c.env_remove("FEDSIM_WORKERS");
    c
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

const QUAD_FEDAVG: &str = r#"{
  "schema_version": 1,
  "seed": 7,
  "dataset": { "kind": "quadratic", "curvatures": [1.0, 3.0], "optima": [0.0, 1.0] },
  "strategy": { "name": "fedavg" },
  "engine": { "rounds": 5, "local_epochs": 2, "lr_local": 0.1 }
}"#;

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn run_writes_outputs_with_one_line_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "quad.json", QUAD_FEDAVG);
    let out_dir = dir.path().join("out");
    let out = bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&out_dir).output().unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let metrics = fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["schema_version"], 1);
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["strategy"], "fedavg");
    assert_eq!(summary["rounds_run"], 5);
    let curves = fs::read_to_string(out_dir.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 6);
    assert!(curves.starts_with("schema_version,round,"));
}

#[test]
fn rerun_is_byte_identical_and_seed_override_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "quad.json", QUAD_FEDAVG);
    let run = |args: &[&str], out_dir: &Path| {
        let out = bin()
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out_dir)
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        fs::read(out_dir.join("metrics.jsonl")).unwrap()
    };
    let a = run(&[], &dir.path().join("a"));
    let b = run(&[], &dir.path().join("b"));
    let c = run(&["--seed", "9"], &dir.path().join("c"));
    assert_eq!(a, b, "same config must reproduce byte-identical metrics");
    assert_ne!(a, c, "a different seed must change the run");
}

#[test]
fn worker_count_does_not_change_output_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "quad.json", QUAD_FEDAVG);
    let one = dir.path().join("w1");
    let eight = dir.path().join("w8");
    let out1 = bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&one).args(["--workers", "1"]).output().unwrap();
    assert!(out1.status.success());
    // Second run picks its worker count from the environment.
    let out8 = bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&eight).env("FEDSIM_WORKERS", "8").output().unwrap();
    assert!(out8.status.success());
    assert_eq!(
        fs::read(one.join("metrics.jsonl")).unwrap(),
        fs::read(eight.join("metrics.jsonl")).unwrap(),
    );
}

#[test]
fn malformed_workers_env_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "quad.json", QUAD_FEDAVG);
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .env("FEDSIM_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_strategy_exits_two_and_lists_the_registry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "bad.json", &QUAD_FEDAVG.replace("fedavg", "fedmagic"));
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("fedavg"), "stderr should list known strategies: {}", stderr(&out));
}

#[test]
fn schema_violation_exits_two_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "bad.json", &QUAD_FEDAVG.replace("\"rounds\": 5", "\"rounds\": \"five\""));
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("engine.rounds"), "stderr: {}", stderr(&out));
}

#[test]
fn missing_config_exits_four() {
    let out = bin().args(["run", "--config", "/nonexistent/cfg.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn divergent_run_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "boom.json", &QUAD_FEDAVG.replace("\"lr_local\": 0.1", "\"lr_local\": 1e9"));
    let out = bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("out")).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("round"), "stderr: {}", stderr(&out));
}

#[test]
fn set_override_reaches_the_engine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "quad.json", QUAD_FEDAVG);
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .args(["--set", "engine.rounds=3", "--set", "strategy.name=fedprox", "--set", "strategy.params.mu=0.5"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let metrics = fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["strategy"], "fedprox");
}

#[test]
fn set_override_with_bad_shape_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "quad.json", QUAD_FEDAVG);
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--set", "engine.rounds"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compare_emits_identical_rows_for_duplicate_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "quad.json", QUAD_FEDAVG);
    let out = bin().arg("compare").arg(&cfg).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("schema_version,config,strategy,"));
    assert_eq!(lines[1], lines[2]);
    assert!(lines[1].contains("fedavg"));
}

#[test]
fn gradcheck_zero_trials_is_a_noop_pass() {
    let out = bin().args(["gradcheck", "--trials", "0"]).output().unwrap();
    assert!(out.status.success());
}

#[test]
fn gradcheck_corrupt_mode_names_the_failing_op() {
    let out = bin()
        .args(["gradcheck", "--family", "linear", "--trials", "2", "--corrupt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL"));
    assert!(stderr(&out).contains("gradient/linear"));
}

#[test]
fn list_is_stable_and_contains_fedavg() {
    let a = bin().arg("list").output().unwrap();
    let b = bin().arg("list").output().unwrap();
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("fedavg"));
    assert!(stdout(&a).contains("hypcluster"));
}
