use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn neil(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neil")).args(args).current_dir(cwd).env("NEIL_LOG_LEVEL", "warn").output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let cfg = json!({
        "generator": {"num_tables": 20, "num_items": 400},
        "experiment": {
            "experiment_id": "small",
            "split": {"init_fraction": 0.1, "validation_size": 50, "test_size": 50},
            "m": 30,
            "iterations": 2,
            "train": {"max_epochs": 40}
        }
    });
    let path = dir.join("c.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir).unwrap().map(|e| e.unwrap()).map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())).collect();
    v.sort();
    v
}

#[test]
fn gen_corpus_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    for out in ["a", "b"] {
        let o = neil(&["gen-corpus", "--config", &cfg, "--seed", "7", "--out", out], tmp.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = read_dir_bytes(&tmp.path().join("a"));
    assert_eq!(a.len(), 2);
    assert_eq!(a, read_dir_bytes(&tmp.path().join("b")));
    let o = neil(&["gen-corpus", "--config", &cfg, "--seed", "8", "--out", "c"], tmp.path());
    assert!(o.status.success());
    assert_ne!(a, read_dir_bytes(&tmp.path().join("c")));
}

#[test]
fn run_sim_honours_system_selection_and_report_averages() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = neil(&["gen-corpus", "--config", &cfg, "--seed", "3", "--out", "corpus"], tmp.path());
    assert!(o.status.success());
    let o = neil(&["run-sim", "--config", &cfg, "--corpus", "corpus", "--systems", "neil,full-expert", "--seed", "0", "--out", "runs"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let seed_dir = tmp.path().join("runs/small/seed-0");
    let csv = fs::read_to_string(seed_dir.join("reports.csv")).unwrap();
    let mut systems: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    systems.dedup();
    assert_eq!(systems, ["NEIL", "FULL_EXPERT"]);
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(seed_dir.join("summary.json").exists());
    assert!(seed_dir.join("checkpoints/neil-best.json").exists());
    assert!(seed_dir.join("checkpoints/full_expert-best.json").exists());

    let o = neil(&["report", "--config", &cfg, "--out", "runs"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let series = tmp.path().join("runs/small/series/small");
    assert!(series.join("NEIL/test_acc_vs_annotations.csv").exists());
    assert!(series.join("NEIL/interactions_per_q.csv").exists());
    assert!(series.join("FULL_EXPERT/test_acc_vs_iteration.csv").exists());
    assert!(tmp.path().join("runs/small/final.csv").exists());
    // Only the selected systems were run, so no trend verdict is written.
    assert!(!tmp.path().join("runs/small/trends.json").exists());
}

#[test]
fn init_train_writes_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let o = neil(&["init-train", "--config", &cfg, "--seed", "1", "--out", "init"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("init/init-summary.json")).unwrap()).unwrap();
    assert_eq!(summary["init_questions"], 30);
    assert!(summary["val_acc"].as_f64().unwrap() >= 0.0);
    assert!(tmp.path().join("init/init-policy.json").exists());
}

#[test]
fn theory_lab_sweep_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let o = neil(&["theory-lab", "--sweep", "mu=0.5:0.05:1.0", "--out", "t"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("t/theory/sweep.csv")).unwrap();
    let mus: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(mus.len(), 11);
    assert_eq!(mus.first(), Some(&0.5));
    assert_eq!(mus.last(), Some(&1.0));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("t/theory/report.json")).unwrap()).unwrap();
    assert!(report["j_best"].as_f64().unwrap() <= report["bound"].as_f64().unwrap() + 1.0);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(neil(&["run-sim", "--bogus"], tmp.path()).status.code(), Some(2));
    assert_eq!(neil(&["no-such-command"], tmp.path()).status.code(), Some(2));
    assert_eq!(neil(&["theory-lab", "--sweep", "0.5:1"], tmp.path()).status.code(), Some(2));
    assert_eq!(neil(&["run-sim", "--systems", "neil,oracle"], tmp.path()).status.code(), Some(2));
    assert_eq!(neil(&["run-sim", "--config", "missing.json", "--out", "x"], tmp.path()).status.code(), Some(1));
    fs::write(tmp.path().join("bad.json"), r#"{"experiment": {"m": "many"}}"#).unwrap();
    assert_eq!(neil(&["run-sim", "--config", "bad.json", "--out", "x"], tmp.path()).status.code(), Some(1));
    assert_eq!(neil(&["report", "--out", "empty"], tmp.path()).status.code(), Some(1));
    assert_eq!(neil(&["--help"], tmp.path()).status.code(), Some(0));
    // Failed commands leave nothing behind but their own output directory.
    let left: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(left.iter().all(|n| n == "bad.json" || n == "x"), "{left:?}");
}
