mod common;

use std::path::Path;
use std::process::{Command, Output};

fn tmlp(args: &[&str], cwd: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tmlp"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("TMLP_")) {
        cmd.env_remove(k);
    }
    cmd.args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn empty_selection_writes_only_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = tmlp(&["run", "--output-dir", "reports"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let files: Vec<_> = std::fs::read_dir(dir.path().join("reports")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files, vec!["manifest.json"]);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("reports/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["reports"], serde_json::json!([]));
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn bad_weights_path_fails_validation_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = common::data("vocab.json");
    let merges = common::data("merges.txt");
    let out = tmlp(
        &[
            "run",
            "--experiments",
            "knowledge",
            "--weights",
            "missing.safetensors",
            "--vocab",
            vocab.to_str().unwrap(),
            "--merges",
            merges.to_str().unwrap(),
            "--output-dir",
            "reports",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("weights"));
    assert!(!dir.path().join("reports").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "theta = 0.2\nnot_a_key = 1\n").unwrap();
    assert_eq!(tmlp(&["validate-config", "--config", "c.toml"], dir.path()).status.code(), Some(2));
    assert_eq!(tmlp(&["run", "--experiments", "nope"], dir.path()).status.code(), Some(2));
    assert_eq!(tmlp(&["run", "--sequence-length", "4096"], dir.path()).status.code(), Some(2));
}

#[test]
fn validate_config_prints_resolved_values() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "theta = 0.2\nsequence_count = 9\n").unwrap();
    let out = tmlp(&["validate-config", "--config", "c.toml", "--sequence-count", "12", "--preset", "desk"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("theta = 0.2"));
    assert!(text.contains("sequence_count = 12"));
    assert!(text.contains("preset = \"desk\""));
}

#[test]
fn tokenize_and_list() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = common::data("vocab.json");
    let merges = common::data("merges.txt");
    let out = tmlp(
        &["tokenize", "--text", "Hello world", "--vocab", vocab.to_str().unwrap(), "--merges", merges.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "15496\t\"Hello\"\n995\t\" world\"\n");
    let out = tmlp(&["list-experiments"], dir.path());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), tmlp::experiments::EXPERIMENTS.len());
}
