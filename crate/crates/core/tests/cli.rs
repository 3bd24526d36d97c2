// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn smoke(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/smoke").join(name)
}

fn valsteer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_valsteer")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn validate_accepts_smoke_config() {
    let out = valsteer(&["validate", "--config", p(&smoke("overton.json"))]);
    assert_ok(&out);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

#[test]
fn validate_lists_every_violation_with_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 1, "mode": "overton", "inputs": "missing.jsonl", "output_dir": "out", "k": 0}"#,
    )
    .unwrap();
    let out = valsteer(&["validate", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().count() >= 2, "{stdout}");
    assert!(stdout.contains("k must be"));
    assert!(stdout.contains("missing.jsonl"));
}

#[test]
fn gate_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    let gates = dir.path().join("gates.jsonl");
    let stats = dir.path().join("stats.json");
    assert_ok(&valsteer(&["gate", "--inputs", p(&smoke("inputs_overton.jsonl")), "--out", p(&gates), "--k", "4"]));
    assert_ok(&valsteer(&["stats", "--gates", p(&gates), "--out", p(&stats)]));
    let s: Value = serde_json::from_slice(&std::fs::read(&stats).unwrap()).unwrap();
    assert_eq!(s["k"], 4);
    let rows = s["per_value"].as_array().unwrap();
    assert_eq!(rows.len(), 31);
    let top1: f64 = rows.iter().map(|r| r["top1_pct"].as_f64().unwrap()).sum();
    assert!((top1 - 100.0).abs() < 1e-9);
}

#[test]
fn gate_force_keeps_target() {
    let dir = tempfile::tempdir().unwrap();
    let gates = dir.path().join("gates.jsonl");
    assert_ok(&valsteer(&[
        "gate", "--inputs", p(&smoke("inputs_overton.jsonl")), "--out", p(&gates), "--k", "2", "--force", "karma",
    ]));
    let text = std::fs::read_to_string(&gates).unwrap();
    for line in text.lines() {
        let g: Value = serde_json::from_str(line).unwrap();
        assert!(g["ranked"].as_array().unwrap().iter().any(|r| r["value_id"] == "karma"));
    }
}

#[test]
fn estimate_then_steer() {
    let dir = tempfile::tempdir().unwrap();
    let bank = dir.path().join("bank.vdb");
    assert_ok(&valsteer(&[
        "estimate", "--out", p(&bank), "--values", "benevolence,justice", "--layers", "3,4", "--max-pairs", "6",
    ]));
    let out = valsteer(&[
        "steer", "--prompt", "The river floods the farm.", "--value", "benevolence", "--bank", p(&bank),
        "--policy", "fixed:4.0", "--max-tokens", "12",
    ]);
    assert_ok(&out);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["value_id"], "benevolence");
    assert_eq!(v["layers"], serde_json::json!([3, 4]));
    assert_ne!(v["steered"], v["unsteered"]);

    let missing = valsteer(&["steer", "--prompt", "x", "--value", "karma", "--bank", p(&bank)]);
    assert!(!missing.status.success());
}

#[test]
fn compose_then_eval_overton() {
    let dir = tempfile::tempdir().unwrap();
    let gates = dir.path().join("gates.jsonl");
    let bank = dir.path().join("bank.vdb");
    let responses = dir.path().join("responses.jsonl");
    let comments = dir.path().join("comments.jsonl");
    let report = dir.path().join("report.json");
    assert_ok(&valsteer(&["gate", "--inputs", p(&smoke("inputs_overton.jsonl")), "--out", p(&gates), "--k", "2"]));
    let ids: Vec<String> = std::fs::read_to_string(&gates)
        .unwrap()
        .lines()
        .flat_map(|l| {
            let g: Value = serde_json::from_str(l).unwrap();
            g["ranked"].as_array().unwrap().iter().map(|r| r["value_id"].as_str().unwrap().to_string()).collect::<Vec<_>>()
        })
        .collect();
    let values = ids.join(",");
    assert_ok(&valsteer(&["estimate", "--out", p(&bank), "--values", &values, "--max-pairs", "4"]));
    assert_ok(&valsteer(&[
        "compose", "--mode", "overton", "--gates", p(&gates), "--bank", p(&bank), "--out", p(&responses),
        "--comments-out", p(&comments), "--comment-tokens", "8", "--compose-tokens", "16",
    ]));
    assert_eq!(std::fs::read_to_string(&comments).unwrap().lines().count(), 3);
    assert_ok(&valsteer(&[
        "eval", "--mode", "overton", "--pred", p(&responses), "--gold", p(&smoke("gold_overton.jsonl")),
        "--report", p(&report), "--ci", "50",
    ]));
    let r: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["num_responses"], 3);
    let pct = r["coverage"]["coverage_pct"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&pct));
    assert!(r["fluency"].is_object());
}

#[test]
fn pipeline_subcommand_prints_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value = serde_json::from_slice(&std::fs::read(smoke("distributional.json")).unwrap()).unwrap();
    let base = smoke("");
    for key in ["inputs", "gold"] {
        let rel = cfg[key].as_str().unwrap().to_string();
        cfg[key] = Value::from(p(&base.join(rel)).to_string());
    }
    cfg["output_dir"] = Value::from(p(&dir.path().join("out")).to_string());
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = valsteer(&["pipeline", "--config", p(&path)]);
    assert_ok(&out);
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(m["artifacts"].as_array().unwrap().len() >= 5);
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = valsteer(&["gate", "--inputs", "/nonexistent.jsonl", "--out", "/tmp/never.jsonl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
