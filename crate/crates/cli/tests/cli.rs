use std::path::Path;
use std::process::{Command, Output};

fn pfedgrp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfedgrp"))
        .args(args)
        .env("PFEDGRP_WORKERS", "2")
        .output()
        .expect("binary runs")
}

const SMALL: &str = r#"{
  "methods": ["pfedgrp", "fedavg"],
  "seeds": [0, 1],
  "scenario": {"num_clients": 2, "num_classes": 4, "samples_per_class": 40, "total_rounds": 2},
  "model": {"hidden_dims": [8]},
  "sgd": {"epochs": 2},
  "replay_budget": 64,
  "dataset": {"synthetic": {"num_classes": 4, "feature_dim": 3, "per_class_train": 80, "per_class_test": 40}}
}"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn validate_prints_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", "");
    let out = pfedgrp(&["validate", &cfg]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("\"lr\": 0.01"), "{text}");
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"sgd": {"lrr": 0.5}}"#);
    let out = pfedgrp(&["validate", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lrr"));

    let cfg = write(dir.path(), "d.json", r#"{"seeds": []}"#);
    assert_eq!(pfedgrp(&["run", &cfg]).status.code(), Some(1));
    assert_eq!(pfedgrp(&["validate", "/nonexistent/config.json"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"scenario": {"num_clients": 2, "num_classes": 4, "samples_per_class": 500, "total_rounds": 2},
            "dataset": {"synthetic": {"num_classes": 4, "feature_dim": 3, "per_class_train": 80, "per_class_test": 40}}}"#,
    );
    let out_dir = dir.path().join("out");
    let out = pfedgrp(&["run", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(pfedgrp(&["report", dir.path().join("missing").to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn run_writes_results_and_echo_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    let first = dir.path().join("first");
    let out = pfedgrp(&["run", &cfg, "--out", first.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["config.json", "iaa.csv", "summary.json", "iaa.svg", "runs/pfedgrp_seed1/record.json", "runs/fedavg_seed0/iaa.csv"] {
        assert!(first.join(name).is_file(), "{name} missing");
    }
    let csv = std::fs::read_to_string(first.join("iaa.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("method,scenario,seed,round,iaa"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);

    let second = dir.path().join("second");
    let echo = first.join("config.json");
    let out = pfedgrp(&["run", echo.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert!(out.status.success());
    for name in ["iaa.csv", "summary.json", "iaa.svg", "runs/pfedgrp_seed0/record.json"] {
        assert_eq!(
            std::fs::read(first.join(name)).unwrap(),
            std::fs::read(second.join(name)).unwrap(),
            "{name}"
        );
    }

    let summary_before = std::fs::read(first.join("summary.json")).unwrap();
    let out = pfedgrp(&["report", first.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("pfedgrp"));
    assert_eq!(std::fs::read(first.join("summary.json")).unwrap(), summary_before);
}

#[test]
fn bad_worker_count_is_a_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_pfedgrp"))
        .args(["validate", "x.json"])
        .env("PFEDGRP_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
