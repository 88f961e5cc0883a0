use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "synth": {"train_videos": 4, "validation_videos": 2, "test_videos": 2, "frames_per_video": 3},
  "train": {"batch_size": 4, "patchnet_iters": 2, "finetune_iters": 4, "eval_every": 2, "eval_batch": 16}
}"#;

fn lscnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lscnn"))
        .args(args)
        .env("LSCNN_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lscnn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = lscnn(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stderr).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_synth_writes_identical_trees_for_one_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let stdout = ok(&["gen-synth", "--config", cfg, "--out", a.to_str().unwrap(), "--seed", "3"]);
    assert!(stdout.contains("train") && stdout.contains("attack"));
    ok(&["gen-synth", "--config", cfg, "--out", b.to_str().unwrap(), "--seed", "3"]);
    for split in ["train", "validation", "test"] {
        assert!(a.join("data").join(split).is_dir(), "{split} missing");
    }
    assert!(a.join("data/manifest.json").is_file());
    let (ta, tb) = (tree(&a.join("data")), tree(&b.join("data")));
    assert_eq!(ta.len(), tb.len());
    for (path, bytes) in &ta {
        if path.file_name().unwrap() == "summary.json" {
            continue;
        }
        assert_eq!(Some(bytes), tb.get(path), "{} differs", path.display());
    }
}

#[test]
fn missing_output_is_a_usage_error() {
    fails_with(&["gen-synth"], 2);
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"train": {"learning_rate": 0.1}}"#);
    let err = fails_with(
        &["gen-synth", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()],
        2,
    );
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn non_empty_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let args = ["gen-synth", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()];
    ok(&args);
    let err = fails_with(&args, 2);
    assert!(err.contains("--force"), "{err}");
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&forced);
}

#[test]
fn eval_rejects_missing_and_mismatched_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    let out = tmp.path().to_str().unwrap();
    ok(&["gen-synth", "--config", cfg, "--out", out]);
    let missing = tmp.path().join("nope.ckpt");
    let code = lscnn(&["eval", "--config", cfg, "--out", out, "--checkpoint", missing.to_str().unwrap()])
        .status
        .code();
    assert_ne!(code, Some(0));

    ok(&["train-patchnets", "--config", cfg, "--out", out]);
    let p1 = tmp.path().join("patchnets/p1.ckpt");
    let err = fails_with(&["eval", "--config", cfg, "--out", out, "--checkpoint", p1.to_str().unwrap()], 5);
    assert!(err.contains("spec_digest"), "{err}");
}

#[test]
fn compose_names_the_missing_patchnet() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    let out = tmp.path().to_str().unwrap();
    ok(&["gen-synth", "--config", cfg, "--out", out]);
    fails_with(&["compose", "--config", cfg, "--out", out], 3);
    ok(&["train-patchnets", "--config", cfg, "--out", out]);
    std::fs::remove_file(tmp.path().join("patchnets/p6.ckpt")).unwrap();
    let err = fails_with(&["compose", "--config", cfg, "--out", out], 3);
    assert!(err.contains("p6") && !err.contains("p5"), "{err}");
}

fn pipeline(dir: &Path, cfg: &str) -> (Value, String) {
    let out = dir.to_str().unwrap();
    ok(&["gen-synth", "--config", cfg, "--out", out]);
    ok(&["train-patchnets", "--config", cfg, "--out", out]);
    ok(&["compose", "--config", cfg, "--out", out]);
    ok(&["finetune", "--config", cfg, "--out", out]);
    ok(&["eval", "--config", cfg, "--out", out, "--split", "validation"]);
    let val = read_json(&dir.join("eval/finetune_best_validation.json"));
    let t = val["eer_threshold"].as_f64().unwrap().to_string();
    let stdout = ok(&["eval", "--config", cfg, "--out", out, "--threshold", &t]);
    (read_json(&dir.join("finetune/summary.json")), stdout)
}

#[test]
fn pipeline_runs_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    let (a, stdout_a) = pipeline(&tmp.path().join("a"), cfg);
    let (b, stdout_b) = pipeline(&tmp.path().join("b"), cfg);

    assert!(stdout_a.contains("HTER"), "{stdout_a}");
    assert!(stdout_a.contains("EER"));
    assert_eq!(a["metrics"], b["metrics"]);
    assert_eq!(stdout_a, stdout_b);
    assert_eq!(a["config_digest"].as_str().unwrap().len(), 64);
    assert_eq!(a["metrics"]["iterations"], 4);

    let run = tmp.path().join("a");
    let history = std::fs::read_to_string(run.join("finetune/history.csv")).unwrap();
    assert!(history.starts_with("iteration,train_loss,val_eer"));
    assert_eq!(history.lines().count(), 5);
    let test = read_json(&run.join("eval/finetune_best_test.json"));
    assert!(test["hter"].is_number());
    assert!(run.join("eval/finetune_best_test_roc.csv").is_file());
    assert!(run.join("finetune/best.ckpt").is_file() && run.join("finetune/final.ckpt").is_file());
}

#[test]
fn baseline_trains_from_scratch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    let out = tmp.path().to_str().unwrap();
    ok(&["gen-synth", "--config", cfg, "--out", out]);
    ok(&["train-baseline", "--config", cfg, "--out", out]);
    let summary = read_json(&tmp.path().join("baseline/summary.json"));
    assert_eq!(summary["command"], "train-baseline");
    assert!(summary["metrics"]["best_val_eer"].is_number());
}
