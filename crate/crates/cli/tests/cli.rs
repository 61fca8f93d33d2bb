use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &[&str] = &[
    "--set", "synth.n_users=150",
    "--set", "synth.n_items=60",
    "--set", "synth.n_clusters=5",
    "--set", "cf.dim=8",
    "--set", "cf.epochs=2",
    "--set", "lm.d_model=16",
    "--set", "lm.n_blocks=1",
    "--set", "lm.max_len=64",
    "--set", "lm.max_epochs=2",
    "--set", "max_val_cases=20",
    "--set", "max_train_examples=300",
];

fn tokalign(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokalign"))
        .current_dir(dir)
        .args(TINY)
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn staged_pipeline_produces_artifacts_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let gen = json(&tokalign(d, &["synth-gen", "--out", "raw"]));
    assert_eq!(gen["items"], 60);
    let prep = json(&tokalign(
        d,
        &["--interactions", "raw/interactions.jsonl", "--items", "raw/items.jsonl", "prepare-data", "--out", "prep"],
    ));
    assert!(prep["stats"]["users"].as_u64().unwrap() > 0);
    assert_eq!(prep["input_hashes"].as_object().unwrap().len(), 2);
    json(&tokalign(d, &["train-cf", "--data", "prep", "--out", "cf.ckpt"]));
    let exp = json(&tokalign(d, &["export-logits", "--data", "prep", "--cf", "cf.ckpt", "--out", "z.bin"]));
    assert!(d.join("z.bin.manifest.json").exists());
    assert!(exp["count"].as_u64().unwrap() > 0);
    let lm = json(&tokalign(
        d,
        &["--alpha", "0.4", "train-lm", "--data", "prep", "--cf", "cf.ckpt", "--out", "lm.ckpt", "--log", "log.jsonl"],
    ));
    assert_eq!(lm["label"], "TCA");
    assert!(std::fs::read_to_string(d.join("log.jsonl")).unwrap().lines().count() >= 1);
    let eval = json(&tokalign(
        d,
        &["--alpha", "0.4", "evaluate", "--data", "prep", "--cf", "cf.ckpt", "--lm", "lm.ckpt", "--trace", "t.jsonl"],
    ));
    assert_eq!(eval["invalid_generations"], 0);
    assert_eq!(eval["config_hash"], lm["config_hash"]);
    for key in ["HR@5", "NDCG@5", "HR@10", "NDCG@10", "CC"] {
        assert!(eval[key].is_number(), "{key}");
    }
}

#[test]
fn run_is_deterministic_and_labels_ablations() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["--objective", "soft_ntp", "--ablation", "uniform_ct", "--alpha", "0.4", "run"];
    let a = json(&tokalign(tmp.path(), &args));
    let b = json(&tokalign(tmp.path(), &args));
    assert_eq!(a["label"], "w/o CT");
    assert_eq!(a["test"], b["test"]);
    assert!(a["config_hash"].is_string() && a["input_hashes"].is_object());
    let aux = json(&tokalign(tmp.path(), &["--objective", "aux_kl", "run"]));
    assert_eq!(aux["label"], "w/o SA");
}

#[test]
fn sweep_reuses_cached_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["--output-dir", "out", "alpha-sweep", "--alphas", "0,0.8"];
    let first = json(&tokalign(tmp.path(), &args));
    assert_eq!(first.as_array().unwrap().len(), 2);
    let cached = std::fs::read_dir(tmp.path().join("out")).unwrap().filter(|e| {
        e.as_ref().unwrap().file_name().to_string_lossy().starts_with("sweep-")
    });
    assert_eq!(cached.count(), 2);
    let again = json(&tokalign(tmp.path(), &args));
    assert_eq!(first, again);
}

#[test]
fn grad_check_reports_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let r = json(&tokalign(tmp.path(), &["grad-check", "--instances", "10"]));
    assert_eq!(r["soft_ntp_pass"], true);
    assert_eq!(r["aux_kl_pass"], true);
}

#[test]
fn bad_input_fails_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tokalign(tmp.path(), &["--set", "lm.nope=1", "show-config"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lm.nope"));
    let out = tokalign(tmp.path(), &["--alpha", "1.5", "run"]);
    assert_eq!(out.status.code(), Some(2));
    let out = tokalign(tmp.path(), &["train-cf", "--data", "missing", "--out", "cf.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
}
