//! End-to-end command tests through the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_laplace-net")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(binary())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, contents).unwrap();
    path
}

const TRAIN_CONFIG: &str = r#"{
  "version": 1,
  "seed": 11,
  "data": {
    "train": { "kind": "two-moons", "n_per_class": 80, "noise_std": 0.1 },
    "eval": { "kind": "two-moons", "n_per_class": 40, "noise_std": 0.1, "seed_offset": 1 }
  },
  "graph": { "m": 8, "n": 4 },
  "net": { "theta_widths": [12, 8], "buffer_width": 8 },
  "train": { "alternations": 1, "epochs_linear": 15, "epochs_wnll": 2,
             "lr_schedule": [[1, 0.1]], "batch_linear": 32, "batch_wnll": 200 }
}"#;

#[test]
fn gen_data_writes_files_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "config.json",
        r#"{"version":1,"seed":3,"data":{"train":{"kind":"two-moons","n_per_class":30,"noise_std":0.05}}}"#,
    );
    let out = run(dir.path(), &["gen-data", "--config", "config.json", "--out", "g"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("g/data.csv").exists());
    assert!(dir.path().join("g/report.json").exists());
    assert!(dir.path().join("g/metrics.csv").exists());
}

#[test]
fn interpolate_deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "config.json",
        r#"{
          "version": 1, "seed": 5,
          "data": { "train": { "kind": "two-moons", "n_per_class": 60, "noise_std": 0.1 } },
          "graph": { "m": 8, "n": 4 },
          "train": { "template_fraction": 0.5, "baseline_epochs": 10 }
        }"#,
    );
    let a = run(dir.path(), &["interpolate", "--config", "config.json", "--out", "a"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = run(dir.path(), &["interpolate", "--config", "config.json", "--out", "b"]);
    assert!(b.status.success());
    // identical config -> bitwise-identical metrics and scores
    let metrics_a = std::fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let metrics_b = std::fs::read(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(metrics_a, metrics_b);
    let scores_a = std::fs::read(dir.path().join("a/scores.csv")).unwrap();
    let scores_b = std::fs::read(dir.path().join("b/scores.csv")).unwrap();
    assert_eq!(scores_a, scores_b);
}

#[test]
fn unknown_config_key_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "bad.json",
        r#"{"version":1,"data":{"train":{"kind":"two-moons","n_per_class":10,"noise_std":0.1}},"typo_section":{}}"#,
    );
    let out = run(dir.path(), &["gen-data", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("typo_section"), "{stderr}");
}

#[test]
fn missing_referenced_file_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "missing.json",
        r#"{"version":1,"data":{"train":{"kind":"csv","path":"nope.csv","label_column":0}}}"#,
    );
    let out = run(dir.path(), &["gen-data", "--config", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_data_file_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "broken.csv", "a,b,c\n1,oops,0\n");
    write(
        dir.path(),
        "config.json",
        r#"{"version":1,"data":{"train":{"kind":"csv","path":"broken.csv","label_column":2}}}"#,
    );
    let out = run(dir.path(), &["gen-data", "--config", "config.json"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_checkpoint_key_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "config.json",
        r#"{
          "version": 1,
          "data": { "train": { "kind": "two-moons", "n_per_class": 20, "noise_std": 0.1 } },
          "net": { "theta_widths": [4] },
          "attack": { "kind": "fgsm" }
        }"#,
    );
    let out = run(dir.path(), &["attack", "--config", "config.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_attack_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "train.json", TRAIN_CONFIG);
    let out = run(dir.path(), &["train", "--config", "train.json", "--out", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run/model.ckpt").exists());
    assert!(dir.path().join("run/template.csv").exists());
    assert!(dir.path().join("run/train_log.jsonl").exists());

    // train log lines parse as JSON records
    let log = std::fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    for line in log.lines() {
        let value: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(value.get("stage").is_some());
    }

    write(
        dir.path(),
        "attack.json",
        r#"{
          "version": 1, "seed": 11,
          "data": {
            "train": { "kind": "two-moons", "n_per_class": 30, "noise_std": 0.1, "seed_offset": 2 },
            "eval": { "kind": "csv", "path": "run/template.csv", "label_column": 2 }
          },
          "graph": { "m": 8, "n": 4 },
          "net": { "checkpoint": "run/model.ckpt" },
          "train": { "batch_wnll": 200 },
          "attack": { "kind": "fgsm", "params": { "epsilon": 0.08 } },
          "output": { "export_adversarial": true }
        }"#,
    );
    let out = run(dir.path(), &["attack", "--config", "attack.json", "--out", "adv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("adv/adversarial.csv").exists());
    assert!(dir.path().join("adv/adversarial-manifest.json").exists());

    write(
        dir.path(),
        "eval.json",
        r#"{
          "version": 1, "seed": 11,
          "data": {
            "train": { "kind": "two-moons", "n_per_class": 30, "noise_std": 0.1, "seed_offset": 2 },
            "eval": { "kind": "csv", "path": "run/template.csv", "label_column": 2 }
          },
          "graph": { "m": 8, "n": 4 },
          "net": { "checkpoint": "run/model.ckpt" },
          "train": { "batch_wnll": 200 },
          "robust": { "eval_attacks": [ { "name": "fgsm", "kind": "fgsm", "params": { "epsilon": 0.05 } } ] }
        }"#,
    );
    let out = run(dir.path(), &["eval", "--config", "eval.json", "--out", "ev"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ev/robust_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["mode"], "white-box");
    assert!(report["robust_accuracy"]["fgsm"].is_number());
}

#[test]
fn zero_epsilon_attack_keeps_natural_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    // image-unit data: a zero-budget attack must be the exact identity
    let unit_cfg = TRAIN_CONFIG.replace(
        "\"noise_std\": 0.1 }",
        "\"noise_std\": 0.1, \"unit_box\": true }",
    );
    write(dir.path(), "train.json", &unit_cfg);
    let out = run(dir.path(), &["train", "--config", "train.json", "--out", "run"]);
    assert!(out.status.success());

    write(
        dir.path(),
        "eval0.json",
        r#"{
          "version": 1, "seed": 11,
          "data": {
            "train": { "kind": "two-moons", "n_per_class": 30, "noise_std": 0.1, "seed_offset": 2, "unit_box": true },
            "eval": { "kind": "csv", "path": "run/template.csv", "label_column": 2 }
          },
          "graph": { "m": 8, "n": 4 },
          "net": { "checkpoint": "run/model.ckpt" },
          "train": { "batch_wnll": 200 },
          "robust": { "eval_attacks": [ { "name": "null", "kind": "fgsm", "params": { "epsilon": 0.0 } } ] }
        }"#,
    );
    let out = run(dir.path(), &["eval", "--config", "eval0.json", "--out", "ev0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ev0/robust_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["natural_accuracy"], report["robust_accuracy"]["null"]);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let two_pass = TRAIN_CONFIG.replace("\"alternations\": 1", "\"alternations\": 2");
    write(dir.path(), "full.json", &two_pass);
    let out = run(dir.path(), &["train", "--config", "full.json", "--out", "full"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // resume from the pass-1 wnll checkpoint
    let resumed_cfg = two_pass
        .replace(
            "\"net\": { \"theta_widths\": [12, 8], \"buffer_width\": 8 }",
            "\"net\": { \"theta_widths\": [12, 8], \"buffer_width\": 8, \"checkpoint\": \"full/checkpoint-p1-wnll.ckpt\" }",
        )
        .replace(
            "\"batch_wnll\": 200 }",
            "\"batch_wnll\": 200, \"resume_after\": { \"pass\": 1, \"stage\": \"wnll\" } }",
        );
    write(dir.path(), "resume.json", &resumed_cfg);
    let out = run(dir.path(), &["train", "--config", "resume.json", "--out", "resumed"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let full_model = std::fs::read(dir.path().join("full/model.ckpt")).unwrap();
    let resumed_model = std::fs::read(dir.path().join("resumed/model.ckpt")).unwrap();
    assert_eq!(full_model, resumed_model, "resumed trajectory diverged");
}

#[test]
fn threads_flag_caps_workers() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "config.json",
        r#"{
          "version": 1, "seed": 5,
          "data": { "train": { "kind": "two-moons", "n_per_class": 40, "noise_std": 0.1 } },
          "graph": { "m": 6, "n": 3 }
        }"#,
    );
    let capped = run(
        dir.path(),
        &["interpolate", "--config", "config.json", "--threads", "1", "--out", "t1"],
    );
    assert!(capped.status.success(), "{}", String::from_utf8_lossy(&capped.stderr));
    let wide = run(
        dir.path(),
        &["interpolate", "--config", "config.json", "--threads", "3", "--out", "t3"],
    );
    assert!(wide.status.success());
    // worker count must not change results
    let a = std::fs::read(dir.path().join("t1/scores.csv")).unwrap();
    let b = std::fs::read(dir.path().join("t3/scores.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn env_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "config.json",
        r#"{"version":1,"seed":1,"data":{"train":{"kind":"two-moons","n_per_class":20,"noise_std":0.1}}}"#,
    );
    let base = Command::new(binary())
        .current_dir(dir.path())
        .args(["gen-data", "--config", "config.json", "--out", "s1"])
        .output()
        .unwrap();
    assert!(base.status.success());
    let overridden = Command::new(binary())
        .current_dir(dir.path())
        .env("LAPLACE_NET_SEED", "99")
        .args(["gen-data", "--config", "config.json", "--out", "s99"])
        .output()
        .unwrap();
    assert!(overridden.status.success());
    let a = std::fs::read(dir.path().join("s1/data.csv")).unwrap();
    let b = std::fs::read(dir.path().join("s99/data.csv")).unwrap();
    assert_ne!(a, b, "seed override had no effect");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("s99/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["seed"], 99);
}

#[test]
fn interpolate_template_only_requires_query() {
    // template = all data with no eval set and fraction ~1 leaves no queries
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "config.json",
        r#"{
          "version": 1, "seed": 2,
          "data": {
            "train": { "kind": "two-moons", "n_per_class": 30, "noise_std": 0.1 },
            "eval": { "kind": "csv", "path": "empty.csv", "label_column": 2 }
          },
          "graph": { "m": 6, "n": 3 }
        }"#,
    );
    write(dir.path(), "empty.csv", "");
    let out = run(dir.path(), &["interpolate", "--config", "config.json"]);
    // empty csv -> format error (exit 3)
    assert_eq!(out.status.code(), Some(3));
}
