use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use apt_core::prompt::PromptSet;
use serde_json::Value;
use tempfile::TempDir;

const SMALL: [&str; 12] = [
    "--set", "tasks=2",
    "--set", "pretrain_classes=4",
    "--set", "cil_classes=4",
    "--set", "train_per_class=4",
    "--set", "test_per_class=2",
    "--set", "pretrain_epochs=1",
];

fn aptlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aptlab")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset directory plus a pretrained backbone.
fn prepared() -> (TempDir, PathBuf, PathBuf) {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let weights = dir.path().join("backbone.aptw");
    let mut args = vec!["gen-data", "--out", s(&data)];
    args.extend(SMALL);
    ok(&aptlab(&args));
    let mut args = vec!["pretrain", "--data", s(&data), "--out", s(&weights)];
    args.extend(SMALL);
    let stdout = ok(&aptlab(&args));
    assert!(stdout.starts_with("pretrain_accuracy "), "{stdout}");
    (dir, data, weights)
}

fn train_cil(data: &Path, weights: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train-cil", "--weights", s(weights), "--data", s(data), "--out", s(out)];
    args.extend(SMALL);
    args.extend(["--set", "epochs=1"]);
    args.extend(extra);
    aptlab(&args)
}

#[test]
fn gen_data_writes_four_splits_and_a_manifest() {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["gen-data", "--out", s(dir.path())];
    args.extend(SMALL);
    ok(&aptlab(&args));
    for f in ["pretrain_train.aptd", "pretrain_test.aptd", "train.aptd", "test.aptd"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["incremental"]["class_offset"], 4);
    assert_eq!(manifest["pretrain"]["n_classes"], 4);
}

#[test]
fn train_cil_writes_run_directory_with_config_echo() {
    let (dir, data, weights) = prepared();
    let out = dir.path().join("run");
    let stdout = ok(&train_cil(&data, &weights, &out, &["--method", "apt", "--alpha", "0.6", "--seed", "3"]));
    assert!(stdout.contains("avg_acc"), "{stdout}");
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    for key in ["method", "seed", "alpha", "avg_acc", "forgetting", "gmacs", "trainable_prompt_params", "config"] {
        assert!(summary.get(key).is_some(), "{key}");
    }
    assert_eq!(summary["method"], "apt");
    assert_eq!(summary["alpha"], 0.6);
    assert_eq!(summary["config"]["seed"], 3);
    assert_eq!(summary["config"]["epochs"], 1);
    assert_eq!(summary["trainable_prompt_params"], 2 * 4 * 64);
    let csv = fs::read_to_string(out.join("eval_matrix.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "after_task,task_0,task_1");
    assert!(csv.lines().nth(1).unwrap().ends_with(','));
    for t in 0..2 {
        let p = PromptSet::load(&out.join(format!("prompts_task{t}.aptw"))).unwrap();
        assert_eq!(p.depth(), 4);
    }
}

#[test]
fn single_task_reports_zero_forgetting() {
    let (dir, data, weights) = prepared();
    let out = dir.path().join("one");
    ok(&train_cil(&data, &weights, &out, &["--tasks", "1"]));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["forgetting"], 0.0);
}

#[test]
fn bad_alpha_is_rejected_before_training() {
    let (dir, data, weights) = prepared();
    let out = dir.path().join("never");
    let res = train_cil(&data, &weights, &out, &["--alpha", "1.5"]);
    assert!(!res.status.success());
    let err = String::from_utf8(res.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error E_CONFIG:"), "{err}");
    assert!(!out.exists());
}

#[test]
fn errors_carry_distinct_tags() {
    let (dir, data, weights) = prepared();
    let out = dir.path().join("x");
    let res = train_cil(&data, &weights, &out, &["--method", "l2p"]);
    assert!(String::from_utf8(res.stderr).unwrap().starts_with("error E_CONFIG:"));

    let junk = dir.path().join("junk.aptw");
    fs::write(&junk, b"NOPE\x01\x00\x00\x00").unwrap();
    let res = train_cil(&data, &junk, &out, &[]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8(res.stderr).unwrap().starts_with("error E_BAD_MAGIC:"));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "# comment\nepochs = 2\nlearning_rate = 0.1\n").unwrap();
    let res = aptlab(&["flops", "--config", s(&cfg)]);
    assert!(String::from_utf8(res.stderr).unwrap().starts_with("error E_CONFIG:"));
}

#[test]
fn flops_table_lists_methods() {
    let csv = ok(&aptlab(&["flops", "--vit-b16"]));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,gmacs,ratio,trainable_prompt_params");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("plain,17.44"), "{}", lines[1]);
    assert!(lines[2].starts_with("apt,17.44") && lines[2].ends_with(",1.0000,18432"), "{}", lines[2]);
    let tiny = ok(&aptlab(&["flops", "--methods", "apt"]));
    assert!(tiny.lines().nth(1).unwrap().ends_with(",512"));
}

#[test]
fn heatmap_geometry_and_zero_prompt_identity() {
    let (dir, data, weights) = prepared();
    let zero = dir.path().join("zero.aptw");
    PromptSet::zeros(4, 64).save(&zero).unwrap();
    let plain = dir.path().join("plain");
    let prompted = dir.path().join("prompted");
    let base = ["heatmap", "--weights", s(&weights), "--data", s(&data), "--image-index", "3", "--layer", "2"];
    let mut args = base.to_vec();
    args.extend(["--out", s(&plain)]);
    ok(&aptlab(&args));
    let mut args = base.to_vec();
    args.extend(["--out", s(&prompted), "--prompts", s(&zero)]);
    ok(&aptlab(&args));

    let pgm = fs::read_to_string(dir.path().join("plain.pgm")).unwrap();
    let mut lines = pgm.lines();
    assert_eq!(lines.next(), Some("P2"));
    assert_eq!(lines.next(), Some("4 4"));
    assert_eq!(lines.next(), Some("255"));
    let cells: Vec<u32> = lines.flat_map(|l| l.split(' ').map(|v| v.parse::<u32>().unwrap())).collect();
    assert_eq!(cells.len(), 16);
    assert!(cells.contains(&0) && cells.contains(&255));

    let csv = fs::read_to_string(dir.path().join("plain.csv")).unwrap();
    let weights: Vec<f64> = csv.lines().flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap())).collect();
    assert_eq!(weights.len(), 16);
    let mass: f64 = weights.iter().sum();
    assert!(mass > 0.0 && mass <= 1.0, "{mass}");
    assert_eq!(csv, fs::read_to_string(dir.path().join("prompted.csv")).unwrap());
    assert_eq!(pgm, fs::read_to_string(dir.path().join("prompted.pgm")).unwrap());
}
