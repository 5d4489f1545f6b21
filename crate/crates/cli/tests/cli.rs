//! End-to-end exercises of the command-line surface.

use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_growstereo");

const CONFIG: &str = r#"
[[scenes]]
name = "rust"
disparity_min = 2.0
disparity_max = 9.0
disparity_layers = 3
height = 48
width = 48
train_pairs = 5
test_pairs = 2
seed = 71
[scenes.style]
tint = [1.0, 0.45, 0.2]
brightness = 0.0
noise_sigma = 0.02
texture_density = 0.7

[[scenes]]
name = "steel"
disparity_min = 2.0
disparity_max = 10.0
disparity_layers = 3
height = 48
width = 48
train_pairs = 5
test_pairs = 2
seed = 72
[scenes.style]
tint = [0.3, 0.5, 1.0]
brightness = 0.2
noise_sigma = 0.08
texture_density = 0.4

[search]
trials = 2

[growth]
trials = 3

[regime]
kind = "supervised"
train_epochs = 2
max_disparity = 12
"#;

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("growstereo-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, CONFIG).unwrap();
    path
}

fn run(args: &[&str]) -> (bool, String, String) {
    let out = Command::new(BIN).args(args).output().expect("binary runs");
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stdout).to_string(),
        String::from_utf8_lossy(&out.stderr).to_string(),
    )
}

#[test]
fn full_run_report_route_and_eval() {
    let dir = workdir("run");
    let cfg = write_config(&dir);
    let out = dir.join("ckpt");

    let (ok, stdout, stderr) = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(ok, "run failed: {stderr}");
    assert!(stdout.contains("fae_epe"));
    assert!(out.join("report.toml").exists());
    assert!(out.join("params.bin").exists());
    assert!(out.join("params.manifest.txt").exists());
    assert!(out.join("ledger.txt").exists());
    assert!(out.join("errors.csv").exists());
    assert!(out.join("traces/search-task1.jsonl").exists());
    assert!(out.join("traces/growth-task2.jsonl").exists());

    // report prints the stored report and a DOT graph
    let (ok, stdout, _) = run(&["report", "--dir", out.to_str().unwrap()]);
    assert!(ok);
    assert!(stdout.contains("digraph growth"));
    assert!(stdout.contains("bwt_epe"));

    // eval recomputes per-task metrics and writes PFM predictions
    let pfm_dir = dir.join("pfm");
    let (ok, stdout, _) = run(&[
        "eval",
        "--dir",
        out.to_str().unwrap(),
        "--save-pfm",
        pfm_dir.to_str().unwrap(),
    ]);
    assert!(ok);
    assert!(stdout.contains("task 1: EPE"));
    assert!(pfm_dir.join("task1_pair000.pfm").exists());

    // route an image produced by gen-scenes
    let scenes_dir = dir.join("scenes");
    let (ok, _, _) = run(&[
        "gen-scenes",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        scenes_dir.to_str().unwrap(),
    ]);
    assert!(ok);
    let img = scenes_dir.join("steel/test/pair_0000/left.png");
    assert!(img.exists());
    let (ok, stdout, _) = run(&[
        "route",
        "--dir",
        out.to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
    ]);
    assert!(ok);
    let parsed: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(parsed["task"], 2);
    assert_eq!(parsed["reconstruction_errors"].as_array().unwrap().len(), 2);
}

#[test]
fn stepwise_phases_and_overrides() {
    let dir = workdir("steps");
    let cfg = write_config(&dir);
    let ckpt = dir.join("steps-ckpt");

    // dotted override shrinks the run further
    let (ok, stdout, stderr) = run(&[
        "search",
        "--config",
        cfg.to_str().unwrap(),
        "--dir",
        ckpt.to_str().unwrap(),
        "--seed",
        "9",
        "--regime.train_epochs",
        "1",
    ]);
    assert!(ok, "search failed: {stderr}");
    assert!(stdout.contains("searched task 1"));

    // task 1 has no growth phase; train completes the task
    let (ok, stdout, _) = run(&["train", "--dir", ckpt.to_str().unwrap()]);
    assert!(ok);
    assert!(stdout.contains("cursor"));

    // wrong phase is a structured error
    let (ok, _, stderr) = run(&["grow", "--dir", ckpt.to_str().unwrap()]);
    assert!(!ok);
    let parsed: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(parsed["error"]["kind"], "invalid_state");

    // task 2: search then grow then train
    let (ok, _, _) = run(&[
        "search",
        "--config",
        cfg.to_str().unwrap(),
        "--dir",
        ckpt.to_str().unwrap(),
    ]);
    assert!(ok);
    let (ok, stdout, stderr) = run(&["grow", "--dir", ckpt.to_str().unwrap()]);
    assert!(ok, "grow failed: {stderr}");
    assert!(stdout.contains("path"));
    let (ok, _, _) = run(&["train", "--dir", ckpt.to_str().unwrap()]);
    assert!(ok);
}

#[test]
fn structured_errors_on_bad_input() {
    let dir = workdir("errors");
    let cfg = write_config(&dir);

    // unknown override field
    let (ok, _, stderr) = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "1",
        "--out",
        dir.join("x").to_str().unwrap(),
        "--search.bogus",
        "3",
    ]);
    assert!(!ok);
    let parsed: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(parsed["error"]["kind"], "invalid_config");

    // missing checkpoint directory
    let (ok, _, stderr) = run(&["report", "--dir", dir.join("nope").to_str().unwrap()]);
    assert!(!ok);
    let parsed: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(parsed["error"]["kind"], "checkpoint");
}
