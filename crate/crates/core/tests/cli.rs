//! The `toolrl` binary: exit codes, outputs and determinism.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const PACK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/pack");

fn toolrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_toolrl")).args(args).output().unwrap()
}

fn pack(file: &str) -> String {
    format!("{PACK}/{file}")
}

fn rollout(out: &Path) -> Output {
    toolrl(&[
        "--offline",
        "rollout",
        "--manifest",
        &pack("manifest.jsonl"),
        "--scripts",
        &pack("scripts.jsonl"),
        "--corpus",
        &pack("corpus.jsonl"),
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn rollout_score_and_reward() {
    let dir = tempfile::tempdir().unwrap();
    assert!(rollout(dir.path()).status.success());
    let run = dir.path().join("predictions.jsonl");

    let csv = toolrl(&[
        "score",
        "--manifest",
        &pack("manifest.jsonl"),
        "--run",
        run.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert_eq!(csv.status.code(), Some(0));
    let text = String::from_utf8(csv.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("simple_f1,simple_em,hard_f1,hard_em,avg_f1,avg_em"));
    assert_eq!(lines.next(), Some("100.00,100.00,100.00,100.00,100.00,100.00"));

    let rewards = toolrl(&["reward", "--manifest", &pack("manifest.jsonl"), "--run", run.to_str().unwrap()]);
    assert!(rewards.status.success());
    let rows: Vec<Value> = String::from_utf8(rewards.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 20);
    for r in &rows {
        assert_eq!(r["format"], 1, "{r}");
        assert_eq!(r["total"].as_f64().unwrap(), 1.0 + r["accuracy"].as_f64().unwrap());
    }
}

#[test]
fn offline_rollout_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(rollout(a.path()).status.success());
    assert!(rollout(b.path()).status.success());
    assert_eq!(common::snapshot(a.path()), common::snapshot(b.path()));
}

#[test]
fn baseline_rollout_answers_directly() {
    let dir = tempfile::tempdir().unwrap();
    let out = toolrl(&[
        "--offline",
        "rollout",
        "--manifest",
        &pack("manifest.jsonl"),
        "--baseline",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("transcripts/code_00.json")).unwrap()).unwrap();
    let user = t["messages"].as_array().unwrap().iter().find(|m| m["role"] == "user").unwrap();
    assert!(user["text"].as_str().unwrap().ends_with("Answer the question directly."), "{user}");
}

#[test]
fn validate_reports_quota_violation() {
    let out = toolrl(&["validate", "--manifest", &pack("manifest.jsonl"), "--plan", "test"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    let ok = toolrl(&["validate", "--manifest", &pack("manifest.jsonl")]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(toolrl(&["score", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(
        toolrl(&[
            "--backend",
            "worker",
            "rollout",
            "--manifest",
            &pack("manifest.jsonl"),
            "--out",
            "/nonexistent/out"
        ])
        .status
        .code(),
        Some(2)
    );
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[rollout]\nmax_turnz = 3\n").unwrap();
    assert_eq!(
        toolrl(&["--config", bad.to_str().unwrap(), "validate", "--manifest", &pack("manifest.jsonl")])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn missing_input_is_runtime_error() {
    let out = toolrl(&["validate", "--manifest", "/nonexistent/manifest.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn build_bench_then_validate() {
    let dir = tempfile::tempdir().unwrap();
    common::write_sources(dir.path(), 210, 24, 18);
    let out_dir = dir.path().join("bench");
    let sources = dir.path().join("sources.jsonl");
    let build = toolrl(&[
        "--seed",
        "5",
        "build-bench",
        "--sources",
        sources.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let manifest = out_dir.join("manifest.jsonl");
    let v = toolrl(&["validate", "--manifest", manifest.to_str().unwrap(), "--plan", "test"]);
    assert_eq!(v.status.code(), Some(0), "{}", String::from_utf8_lossy(&v.stderr));

    // too few sources for the training plan
    let train = toolrl(&[
        "build-bench",
        "--sources",
        sources.to_str().unwrap(),
        "--out",
        dir.path().join("t").to_str().unwrap(),
        "--plan",
        "train",
    ]);
    assert_eq!(train.status.code(), Some(1));
}

#[test]
fn train_toy_writes_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let out = toolrl(&["train-toy", "--updates", "12", "--log", log.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 12);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["update"], i);
        for k in ["mean_reward", "mean_kl", "grad_norm"] {
            assert!(l[k].is_number(), "{k} in {l}");
        }
    }
}
