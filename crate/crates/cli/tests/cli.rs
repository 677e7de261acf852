//! End-to-end CLI tests driving the compiled `adec` binary.

use std::path::Path;
use std::process::{Command, Output};

fn adec(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adec"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("adec runs")
}

fn write_smoke_config(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("run");
    let config = serde_json::json!({
        "experiment": "cli-smoke",
        "model": {
            "vocab_size": 46,
            "d_model": 16,
            "n_layers": 1,
            "n_heads": 2,
            "ctx_len": 128,
            "head_hidden": 8,
            "temperature_grid": [0.0, 0.5, 1.0]
        },
        "corpus": {"stories": 4, "constrained": 4, "arith": 8, "copy": 2, "text": 2},
        "pretrain": {"steps": 300, "learning_rate": 3e-3, "batch_size": 4, "max_seq_len": 48},
        "train_tasks": {"arith": 1, "diverse": 1, "constrained": 1, "general": 1, "completion": 0},
        "eval_tasks": {"arith": 2, "diverse": 2, "constrained": 2, "general": 2, "completion": 2},
        "policy": {"variant": "adaptive_tok", "temp_selection": "sample", "max_new_tokens": 16},
        "loss": {"steps": 3, "batch_size": 2},
        "n_per_prompt": 8,
        "run_seed": 5,
        "output_dir": out
    });
    let path = dir.join("adec.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_smoke_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    for stage in ["pretrain", "gen-pairs", "train-lpo", "generate", "eval", "report"] {
        let out = adec(&[stage, "--config", cfg], dir.path());
        assert!(
            out.status.success(),
            "{stage} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let run = dir.path().join("run");
    assert!(run.join("checkpoints/base.adck").exists());
    assert!(run.join("checkpoints/head.adck").exists());
    assert!(run.join("pairs/pairs.jsonl").exists());
    assert!(run.join("records/records.jsonl").exists());
    assert!(run.join("reports/report.json").exists());
    assert!(run.join("reports/hist_arith.svg").exists());
}

#[test]
fn eval_on_missing_records_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_smoke_config(dir.path());
    let out = adec(&["eval", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing input"), "stderr: {err}");
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"experiment": "x", "unknown_key": 1}"#).unwrap();
    let out = adec(&["pretrain", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = adec(&["pretrain", "--config", dir.path().join("absent.json").to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = adec(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
