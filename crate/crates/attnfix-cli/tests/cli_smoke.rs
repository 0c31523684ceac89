//! End-to-end smoke checks for the `attnfix` binary: exit codes, error
//! messages, and a miniature backdoor pipeline through every subcommand.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn attnfix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnfix"))
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn missing_config_exits_2_with_path() {
    let out = attnfix(&["--config", "/nonexistent/run.json", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nonexistent/run.json"), "{stderr}");
}

#[test]
fn unknown_subcommand_exits_1() {
    let out = attnfix(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{ not json").unwrap();
    let out = attnfix(&["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_value_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, tiny_config(dir.path(), 1.5)).unwrap();
    let out = attnfix(&["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("tau"), "{stderr}");
}

#[test]
fn help_exits_0() {
    let out = attnfix(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

fn tiny_config(out_dir: &Path, tau: f64) -> String {
    format!(
        r#"{{
  "scenario": "backdoor",
  "seeds": [4],
  "victim": {{
    "modality": "image", "n_layers": 1, "n_heads": 1, "d_model": 8,
    "mlp_ratio": 2, "n_classes": 4, "side": 16, "patch": 4
  }},
  "data": {{
    "train": 128, "test": 32, "pool": 64, "eval_pool": 48,
    "debug_pairs": 8, "eval_pairs": 4, "inversion_pool": 8,
    "seed_train": 1, "seed_test": 2, "seed_pool": 8, "seed_eval": 10,
    "seed_inversion_pool": 6
  }},
  "train": {{ "epochs": 10, "batch": 16, "lr": 0.003 }},
  "detector": {{ "seed": 9 }},
  "attack": {{
    "trigger_size": 2, "target_class": 0, "poison_rate": 0.5,
    "seed_poison": 3, "inversion_steps": 300
  }},
  "tau": {tau},
  "mode": "streaming",
  "out": "{}"
}}"#,
        out_dir.join("run").display()
    )
}

/// Miniature pipeline: every subcommand must succeed in sequence and leave
/// its artifacts on disk. Numbers are meaningless at this scale; this
/// checks plumbing only.
#[test]
fn tiny_pipeline_produces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, tiny_config(dir.path(), 0.3)).unwrap();
    let c = cfg.to_str().unwrap();
    for cmd in [
        "gen-data",
        "poison",
        "train-victim",
        "invert-trigger",
        "build-debugset",
        "train-detector",
        "build-qref",
        "ablate",
        "bench-latency",
    ] {
        let out = attnfix(&["--config", c, cmd]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{cmd} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let run = dir.path().join("run");
    for artifact in [
        "debugset/train.json",
        "debugset/train_poisoned.json",
        "debugset/debugset.json",
        "checkpoints/victim.atpt",
        "checkpoints/victim.json",
        "checkpoints/trigger_planted.atpt",
        "checkpoints/trigger_inverted.atpt",
        "checkpoints/detector.atpt",
        "checkpoints/qref.atpt",
        "reports/train_victim.jsonl",
        "reports/inversion.jsonl",
        "reports/ablation.jsonl",
        "reports/latency.jsonl",
        "plots-data/ablation.csv",
        "plots-data/latency.csv",
    ] {
        assert!(run.join(artifact).is_file(), "missing {artifact}");
    }
}
