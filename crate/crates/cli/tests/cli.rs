use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cemb(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cemb"))
        .args(args)
        .current_dir(cwd)
        .env("CEMB_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_SPEC: &str = r#"{
  "m": 2,
  "subgroups": [
    {"label": "dim", "foreground_mean": 0.4, "foreground_std": 0.02, "background_mean": 0.1,
     "background_std": 0.02, "noise": 0.03, "shape": "blob", "min_radius": 5, "max_radius": 7},
    {"label": "bright", "foreground_mean": 0.8, "foreground_std": 0.02, "background_mean": 0.1,
     "background_std": 0.02, "noise": 0.03, "shape": "ellipse", "min_radius": 5, "max_radius": 7}
  ],
  "samples_per_subgroup": 6,
  "image_size": 32,
  "seed": 3
}"#;

const SMALL_RUN: &str = r#"{
  "model": {"image_size": 32, "channels": 8, "patch": 4, "blocks": 1, "subgroups": 2},
  "train": {"batch_size": 4, "pretrain_epochs": 2, "finetune_epochs": 3}
}"#;

fn small_dataset(dir: &Path) {
    fs::write(dir.join("spec.json"), SMALL_SPEC).unwrap();
    fs::write(dir.join("run.json"), SMALL_RUN).unwrap();
    ok(&cemb(&["generate", "--config", "spec.json", "--out", "data"], dir));
}

fn hash_line(o: &Output, kind: &str) -> String {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .find(|l| l.starts_with(kind))
        .expect("hash printed")
        .to_string()
}

#[test]
fn generate_default_counts_and_is_repeatable() {
    let t = tempfile::tempdir().unwrap();
    let a = cemb(&["generate", "--out", "a"], t.path());
    ok(&a);
    let rows = fs::read_to_string(t.path().join("a/manifest.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 300);
    assert!(t.path().join("a/config.json").is_file());
    let b = cemb(&["generate", "--out", "b"], t.path());
    ok(&b);
    assert_eq!(hash_line(&a, "manifest hash"), hash_line(&b, "manifest hash"));
    assert_eq!(hash_line(&a, "content hash"), hash_line(&b, "content hash"));
    let c = cemb(&["generate", "--out", "c", "--seed", "1"], t.path());
    assert_ne!(hash_line(&a, "content hash"), hash_line(&c, "content hash"));
}

#[test]
fn generate_rejects_invalid_spec() {
    let t = tempfile::tempdir().unwrap();
    let bad = SMALL_SPEC.replace("\"m\": 2", "\"m\": 0");
    fs::write(t.path().join("bad.json"), bad).unwrap();
    let o = cemb(&["generate", "--config", "bad.json", "--out", "x"], t.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("spec.m"), "{}", stderr(&o));

    let unknown = SMALL_SPEC.replace("\"seed\": 3", "\"seed\": 3, \"colour\": 1");
    fs::write(t.path().join("unknown.json"), unknown).unwrap();
    let o = cemb(&["generate", "--config", "unknown.json", "--out", "x"], t.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
}

#[test]
fn train_eval_round() {
    let t = tempfile::tempdir().unwrap();
    small_dataset(t.path());
    let started = std::time::Instant::now();
    let o = cemb(&["train", "--config", "run.json", "--data", "data", "--out", "run"], t.path());
    ok(&o);
    assert!(started.elapsed().as_secs() < 60);
    let run = t.path().join("run");
    for f in ["best.ckpt", "history.csv", "config.json", "summary.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 2 + 3);
    assert!(history.starts_with("stage,epoch,train_loss,val_dsc,val_pa"));

    let o = cemb(&["eval", "--checkpoint", "run/best.ckpt", "--overlays", "--out", "ev"], t.path());
    ok(&o);
    let ev = t.path().join("ev");
    assert!(ev.join("config.json").is_file());
    let report: Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    let n = report["metrics"]["overall"]["n"].as_u64().unwrap() as usize;
    assert_eq!(fs::read_dir(ev.join("overlays")).unwrap().count(), 3 * n);

    // JSON aggregates agree with the CSV rows and the per-sample scores.
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let all: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
    assert_eq!(all[0], "all");
    let overall = report["metrics"]["overall"]["dsc"].as_f64().unwrap();
    assert_eq!(all[1].parse::<f64>().unwrap(), overall);
    let samples = report["samples"].as_array().unwrap();
    let mean = samples.iter().map(|s| s["dsc"].as_f64().unwrap()).sum::<f64>() / samples.len() as f64;
    assert!((mean - overall).abs() < 1e-12);

    let other = SMALL_RUN.replace("\"channels\": 8", "\"channels\": 16");
    fs::write(t.path().join("other.json"), other).unwrap();
    let o = cemb(&["eval", "--checkpoint", "run/best.ckpt", "--config", "other.json"], t.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.channels"), "{}", stderr(&o));

    let o = cemb(&["train", "--config", "run.json", "--data", "data", "--out", "ft", "--stage", "finetune", "--init", "run/best.ckpt"], t.path());
    ok(&o);
    assert_eq!(fs::read_to_string(t.path().join("ft/history.csv")).unwrap().lines().count(), 1 + 3);
}

#[test]
fn train_contract_errors() {
    let t = tempfile::tempdir().unwrap();
    small_dataset(t.path());
    let o = cemb(&["train", "--config", "run.json", "--data", "data", "--out", "r", "--stage", "finetune"], t.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--init"));
    let o = cemb(&["train", "--config", "run.json", "--data", "missing", "--out", "r"], t.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing"));
    fs::write(t.path().join("typo.json"), r#"{"trian": {}}"#).unwrap();
    let o = cemb(&["train", "--config", "typo.json", "--out", "r"], t.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("trian"));
}

#[test]
fn overfit_then_eval_on_training_split() {
    let t = tempfile::tempdir().unwrap();
    let spec = SMALL_SPEC.replace("\"samples_per_subgroup\": 6", "\"samples_per_subgroup\": 4");
    fs::write(t.path().join("spec.json"), spec).unwrap();
    ok(&cemb(&["generate", "--config", "spec.json", "--out", "data"], t.path()));
    let run = r#"{
      "model": {"image_size": 32, "channels": 16, "patch": 4, "blocks": 1, "subgroups": 2},
      "train": {"batch_size": 4, "pretrain_epochs": 300, "finetune_epochs": 0, "perturb_max": 0,
                "adam": {"lr": 0.003}},
      "stage": "pretrain"
    }"#;
    fs::write(t.path().join("run.json"), run).unwrap();
    ok(&cemb(&["train", "--config", "run.json", "--data", "data", "--out", "run"], t.path()));
    let o = cemb(&["eval", "--checkpoint", "run/best.ckpt", "--split", "train", "--out", "ev"], t.path());
    ok(&o);
    let report: Value = serde_json::from_str(&fs::read_to_string(t.path().join("ev/metrics.json")).unwrap()).unwrap();
    let d = report["metrics"]["overall"]["dsc"].as_f64().unwrap();
    assert!(d > 0.95, "train dsc {d}");
}

#[test]
fn gradcheck_passes_and_fixture_fails() {
    let t = tempfile::tempdir().unwrap();
    let o = cemb(&["gradcheck"], t.path());
    ok(&o);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("end_to_end_tiny") && out.contains("0 failed"));
    let o = cemb(&["gradcheck", "--dtype", "f64", "--fixture"], t.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn ablate_report_shape() {
    let t = tempfile::tempdir().unwrap();
    small_dataset(t.path());
    let o = cemb(
        &["ablate", "--config", "run.json", "--data", "data", "--out", "ab", "--seeds", "0,1,2", "--pretrain-epochs", "1", "--finetune-epochs", "1"],
        t.path(),
    );
    ok(&o);
    let ab = t.path().join("ab");
    assert!(ab.join("config.json").is_file() && ab.join("summary.txt").is_file());
    let csv = fs::read_to_string(ab.join("ablation.csv")).unwrap();
    // 2 arms × (m + 1) rows × 3 seeds
    assert_eq!(csv.lines().count(), 1 + 2 * 3 * 3);
    let j: Value = serde_json::from_str(&fs::read_to_string(ab.join("ablation.json")).unwrap()).unwrap();
    let runs = j["report"]["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 6);
    for pair in runs.chunks(2) {
        assert_eq!(pair[0]["seed"], pair[1]["seed"]);
        assert_eq!(pair[0]["test_hash"], pair[1]["test_hash"]);
    }
    assert!(j["git"].is_string());
    let o = cemb(&["ablate", "--config", "run.json", "--data", "data", "--out", "ab2", "--seeds", "0,1"], t.path());
    assert_eq!(o.status.code(), Some(1));
}
