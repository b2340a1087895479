use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"{
  "dataset": {"scene": {"height": 32, "width": 32}, "n_source": 8, "n_target": 8, "n_probe": 2},
  "schedule": {"pretrain_epochs": 1, "warmup_rounds": 1, "iter_tr": 6, "iter_joint": 6,
               "checkpoint_every": 3, "log_every": 2},
  "eval": {"eval_interval": 3}
}"#;

fn tiny(dir: &Path) -> PathBuf {
    let path = dir.join("cfg.json");
    fs::write(&path, TINY).unwrap();
    path
}

fn regen(cfg: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regen"))
        .arg("--config")
        .arg(cfg)
        .arg("--output-dir")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn failed(o: Output) -> String {
    assert!(!o.status.success(), "unexpected success: {}", String::from_utf8_lossy(&o.stdout));
    String::from_utf8(o.stderr).unwrap()
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("run/report/report.json")).unwrap()).unwrap()
}

#[test]
fn separate_commands_reproduce_run_all() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for cmd in ["generate-data", "pretrain", "warmup", "train-translation", "train-joint", "evaluate", "report"] {
        ok(regen(&cfg, &a, &[cmd]));
    }
    let summary = ok(regen(&cfg, &b, &["run-all"]));
    assert!(summary.contains("post-joint"), "{summary}");
    let metrics = |d: &Path| fs::read(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics(&a), metrics(&b));
    let (ra, rb) = (report(&a), report(&b));
    for key in ["baseline_miou", "post_warmup_miou", "post_joint_miou", "final_miou", "probe_ce_final"] {
        assert!(ra[key].is_number(), "{key} missing");
        assert_eq!(ra[key], rb[key], "{key}");
    }
    assert!(a.join("run/report/curves/target_miou.png").exists());
    assert!(a.join("run/report/panels/probe_00.png").exists());
    assert_eq!(ra["contracts"]["teacher_unchanged"], Value::Bool(true));
    assert_eq!(ra["contracts"]["frozen_unchanged"], Value::Bool(true));
}

#[test]
fn missing_prerequisite_names_the_phase() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let out = dir.path().join("out");
    let err = failed(regen(&cfg, &out, &["pretrain"]));
    assert!(err.contains("phase `data` has not been run"), "{err}");
    ok(regen(&cfg, &out, &["generate-data"]));
    let err = failed(regen(&cfg, &out, &["warmup"]));
    assert!(err.contains("phase `pretrain` has not been run"), "{err}");
}

#[test]
fn completed_phase_needs_force() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let out = dir.path().join("out");
    ok(regen(&cfg, &out, &["generate-data"]));
    ok(regen(&cfg, &out, &["pretrain"]));
    let err = failed(regen(&cfg, &out, &["pretrain"]));
    assert!(err.contains("--force"), "{err}");
    ok(regen(&cfg, &out, &["pretrain", "--force"]));
}

#[test]
fn evaluating_the_pretrained_checkpoint_is_the_baseline() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let out = dir.path().join("out");
    ok(regen(&cfg, &out, &["generate-data"]));
    ok(regen(&cfg, &out, &["pretrain"]));
    let ck = out.join("run/checkpoints/pretrain.ckpt");
    let printed: Value = serde_json::from_str(&ok(regen(&cfg, &out, &["evaluate", "--checkpoint", ck.to_str().unwrap()]))).unwrap();
    assert_eq!(printed["phase"], "baseline");
    assert!(printed["target"]["miou"].is_number());
    assert!(out.join("run/report/eval_baseline.json").exists());
}

#[test]
fn unknown_sweep_axis_lists_valid_paths() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let err = failed(regen(&cfg, &dir.path().join("out"), &["sweep", "--axis", "loss.nope", "--values", "1"]));
    assert!(err.contains("loss.nope") && err.contains("loss.lambda_pseg"), "{err}");
}

#[test]
fn invalid_config_names_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"schedule": {"iter_tr": "many"}}"#).unwrap();
    let err = failed(regen(&cfg, &dir.path().join("out"), &["show-config"]));
    assert!(err.contains("schedule.iter_tr"), "{err}");
    fs::write(&cfg, r#"{"loss": {"lambda_gen": -1}}"#).unwrap();
    let err = failed(regen(&cfg, &dir.path().join("out"), &["show-config"]));
    assert!(err.contains("lambda_gen"), "{err}");
}

#[test]
fn show_config_fills_defaults() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let v: Value = serde_json::from_str(&ok(regen(&cfg, &dir.path().join("out"), &["show-config", "--seed", "7"]))).unwrap();
    assert_eq!(v["seed"], 7);
    assert_eq!(v["loss"]["lambda_pseg"], 10.0);
    assert_eq!(v["schedule"]["iter_tr"], 6);
}

#[test]
fn sweep_writes_one_row_per_value_and_matches_a_plain_run() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let sweep_out = dir.path().join("sweep");
    ok(regen(&cfg, &sweep_out, &["sweep", "--axis", "loss.lambda_pseg", "--values", "10,0"]));
    let csv = fs::read_to_string(sweep_out.join("sweep/loss.lambda_pseg.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3, "{csv}");
    assert_eq!(rows[0], "value,final_miou");
    assert!(rows[1].starts_with("10,") && rows[2].starts_with("0,"), "{csv}");

    let plain = dir.path().join("plain");
    ok(regen(&cfg, &plain, &["run-all"]));
    let swept: f64 = rows[1].split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(Some(swept), report(&plain)["final_miou"].as_f64());
    // The second point shares every phase before the joint one with the first.
    let point = |v: &str| fs::read(sweep_out.join(format!("sweep/loss.lambda_pseg={v}/run/checkpoints/translation.ckpt"))).unwrap();
    assert_eq!(point("10"), point("0"));
}

#[test]
fn report_can_be_regenerated_from_a_run_directory() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let out = dir.path().join("out");
    ok(regen(&cfg, &out, &["run-all"]));
    let before = report(&out);
    fs::remove_file(out.join("run/report/report.json")).unwrap();
    let moved = dir.path().join("moved");
    fs::rename(&out, &moved).unwrap();
    let printed = Command::new(env!("CARGO_BIN_EXE_regen")).arg("report").arg(moved.join("run")).output().unwrap();
    ok(printed);
    assert_eq!(report(&moved)["final_miou"], before["final_miou"]);
}
