//! Drives the binary through a miniature pipeline.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use conrft_core::record::read_trajectories_file;

fn conrft(args: &[&str], run_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conrft"))
        .args(args)
        .env("CONRFT_RUN_DIR", run_root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], run_root: &Path) -> serde_json::Value {
    let out = conrft(args, run_root);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().expect("summary line")).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A configuration small enough to run every stage in seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    let cfg = serde_json::json!({
        "train": {"offline_steps": 20, "batch_size": 8, "hidden": 32, "online_episodes": 3, "learner_gate": 10},
        "pretrain": {"epochs": 1},
        "pretrain_data": {"episodes_per_env": 2},
        "classifier": {"epochs": 5},
        "examples": {"episodes": 10}
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn unknown_flag_exits_with_usage() {
    let root = tempfile::tempdir().unwrap();
    let out = conrft(&["eval", "--ckpt", "x", "--frobnicate"], root.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(conrft(&["train-online", "--ckpt", "x", "--demos", "y"], root.path()).status.code(), Some(2));
}

#[test]
fn invalid_config_exits_three_with_one_line() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"gamma": 2.0}}"#).unwrap();
    let out = conrft(&["pretrain-encoder", "--config", p(&cfg)], root.path());
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    let v: serde_json::Value = serde_json::from_str(err.trim_end()).unwrap();
    assert_eq!(v["error"], "config");
    assert!(v["message"].as_str().unwrap().contains("gamma"));
}

#[test]
fn runtime_failures_are_single_json_lines() {
    let root = tempfile::tempdir().unwrap();
    let out = conrft(&["eval", "--ckpt", p(&root.path().join("missing"))], root.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(err.trim_end()).unwrap();
    assert_eq!(v["error"], "runtime");
}

#[test]
fn collect_writes_the_requested_trajectories() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("demos.jsonl");
    let summary = ok(
        &["collect", "--env", "reach2d", "--n", "20", "--noise", "0.3", "--out", p(&out)],
        root.path(),
    );
    assert_eq!(summary["written"], 20);
    let recs = read_trajectories_file(&out).unwrap();
    assert_eq!(recs.len(), 20);
    assert!(recs.iter().all(|r| r.header.env == "reach2d" && r.trajectory.success));
    assert!(recs[0].trajectory.transitions.iter().all(|t| t.mc_return.is_some()));
    assert!(root.path().join("demos.jsonl.config.json").exists());
}

#[test]
fn runs_without_out_land_under_the_run_root() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path());
    let summary = ok(&["pretrain-encoder", "--config", p(&cfg)], root.path());
    let dir = PathBuf::from(summary["dir"].as_str().unwrap());
    assert!(dir.starts_with(root.path()));
    assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("pretrain-encoder-"));
    let snap: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["command"], "pretrain-encoder");
    assert_eq!(snap["config"]["pretrain"]["epochs"], 1);
    assert_eq!(lines(&dir.join("losses.jsonl")), 1);
}

#[test]
fn miniature_pipeline_runs_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let cfg = tiny_config(r);
    let demos = r.join("demos.jsonl");
    ok(&["collect", "--env", "reach2d", "--n", "4", "--out", p(&demos)], r);

    let enc = r.join("enc");
    ok(&["pretrain-encoder", "--config", p(&cfg), "--out", p(&enc)], r);

    let cls = r.join("cls");
    let rep = ok(
        &["classifier-train", "--env", "reach2d", "--encoder", p(&enc), "--config", p(&cfg), "--out", p(&cls)],
        r,
    );
    assert_eq!(rep["positives"], 10);

    let run1 = r.join("run1");
    ok(
        &["train-offline", "--demos", p(&demos), "--encoder", p(&enc), "--config", p(&cfg), "--out", p(&run1)],
        r,
    );
    for f in ["manifest.json", "config.json", "losses.jsonl"] {
        assert!(run1.join(f).exists(), "{f} missing");
    }
    assert_eq!(lines(&run1.join("losses.jsonl")), 20);

    let eval = ["eval", "--ckpt", p(&run1), "--env", "reach2d", "--episodes", "5", "--seed", "1"];
    let first = conrft(&eval, r);
    let second = conrft(&eval, r);
    assert!(first.status.success());
    assert_eq!(first.stdout, second.stdout);
    let v: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(v["stage"], "offline");
    assert_eq!(v["episodes"], 5);

    let mismatch = conrft(&["eval", "--ckpt", p(&run1), "--env", "insert2d"], r);
    assert_eq!(mismatch.status.code(), Some(3));

    let online = r.join("online");
    let s = ok(
        &[
            "train-online", "--ckpt", p(&run1), "--demos", p(&demos), "--classifier", p(&cls),
            "--intervener", "scripted", "--out", p(&online),
        ],
        r,
    );
    assert_eq!(s["episodes"], 3);
    assert_eq!(lines(&online.join("metrics.jsonl")), 3);
    let counters: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(online.join("counters.json")).unwrap()).unwrap();
    assert_eq!(counters["intervened_in_replay"], 0);
    assert_eq!(counters["autonomous_in_demo"], 0);

    let sft = r.join("sft");
    ok(&["train-sft", "--demos", p(&demos), "--encoder", p(&enc), "--config", p(&cfg), "--out", p(&sft)], r);
    let v = ok(&["eval", "--ckpt", p(&sft), "--episodes", "2"], r);
    assert_eq!(v["stage"], "sft");
}

#[test]
fn serve_runs_a_bounded_session() {
    let root = tempfile::tempdir().unwrap();
    let v = ok(
        &["serve", "--env", "insert2d", "--port", "0", "--hz", "2000", "--episodes", "1"],
        root.path(),
    );
    assert_eq!(v["episode"], 0);
    assert_eq!(v["success"], false);
}
