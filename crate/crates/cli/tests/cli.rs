use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMOKE: &str = r#"
seed = 3
[train]
iterations = 5
batch = 4
horizon = 2.0
[eval]
scenarios = 6
subtask_size = 3
export = 2
"#;

fn diffcbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffcbf")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn smoke_config(dir: &Path) -> String {
    let p = dir.join("smoke.toml");
    fs::write(&p, SMOKE).unwrap();
    p.to_string_lossy().into_owned()
}

fn train_into(cfg: &str, out: &Path) {
    let o = diffcbf(&["train", "--config", cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn metrics_without_wall_time(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            assert!(v["wall_ms"].is_number());
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train_into(&cfg, &a);
    train_into(&cfg, &b);
    for f in ["checkpoint.json", "metrics.jsonl", "training_curve.svg", "config.json"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let m = metrics_without_wall_time(&a.join("metrics.jsonl"));
    assert_eq!(m.len(), 5);
    assert_eq!(m, metrics_without_wall_time(&b.join("metrics.jsonl")));
    assert_eq!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(b.join("checkpoint.json")).unwrap());
    let config: Value = serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["config"]["train"]["seed"], 3);
    assert_eq!(config["config"]["train"]["iterations"], 5);
}

#[test]
fn seed_flag_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train_into(&cfg, &a);
    let o = diffcbf(&["train", "--config", &cfg, "--seed", "4", "--out", b.to_str().unwrap()]);
    assert!(o.status.success());
    assert_ne!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(b.join("checkpoint.json")).unwrap());
}

#[test]
fn eval_exports_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path());
    let run = tmp.path().join("run");
    train_into(&cfg, &run);
    let ckpt = run.join("checkpoint.json");
    let outs: Vec<_> = ["e1", "e2"].iter().map(|d| tmp.path().join(d)).collect();
    for out in &outs {
        let o = diffcbf(&["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["trajectory_000.csv", "trajectory_000.svg", "trajectory_001.csv", "trajectory_001.svg"] {
        assert_eq!(fs::read(outs[0].join(f)).unwrap(), fs::read(outs[1].join(f)).unwrap(), "{f} differs");
    }
    let reports: Vec<Value> = outs
        .iter()
        .map(|o| {
            let mut v: Value = serde_json::from_str(&fs::read_to_string(o.join("eval.json")).unwrap()).unwrap();
            v["config"].as_object_mut().unwrap().remove("out");
            v
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
    let csv = fs::read_to_string(outs[0].join("trajectory_000.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 101);
    let svg = fs::read_to_string(outs[0].join("trajectory_000.svg")).unwrap();
    assert_eq!(svg.matches("<ellipse").count(), 1);
    let eval: Value = serde_json::from_str(&fs::read_to_string(outs[0].join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["records"].as_array().unwrap().len(), 6);
    assert_eq!(eval["summary"]["violations"], 0);
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path());
    let missing = tmp.path().join("missing.json");
    for cmd in ["eval", "benchmark"] {
        let o = diffcbf(&[
            cmd,
            "--config",
            &cfg,
            "--scenario",
            "double_integrator",
            "--checkpoint",
            missing.to_str().unwrap(),
            "--out",
            tmp.path().to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
    }
    let o = diffcbf(&["eval", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_configs_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        "unknown = 1",
        "[train]\nbatch = 0",
        "[train]\ndt = -0.1",
        "[ablate]\nfactors = [-3.0]",
        "scenario = \"triple_integrator\"",
    ];
    for (i, text) in cases.iter().enumerate() {
        let p = tmp.path().join(format!("c{i}.toml"));
        fs::write(&p, text).unwrap();
        let o = diffcbf(&["ablate", "--config", p.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{text}");
    }
    let o = diffcbf(&["ablate", "--scale", "0", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn wrong_network_shape_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path());
    let run = tmp.path().join("run");
    train_into(&cfg, &run);
    let o = diffcbf(&[
        "eval",
        "--config",
        &cfg,
        "--scenario",
        "quadruple_integrator",
        "--checkpoint",
        run.join("checkpoint.json").to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_dispatches_on_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("m.toml");
    fs::write(&p, format!("mode = \"train\"\n{SMOKE}")).unwrap();
    let out = tmp.path().join("out");
    let o = diffcbf(&["run", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(out.join("checkpoint.json").is_file());
    let o = diffcbf(&["run", "--config", &smoke_config(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
}
