use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use craftlab::report;
use craftlab_core::eval::{EvalReport, ScenarioReport};
use serde_json::Value;

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn craftlab(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_craftlab"))
        .args(args)
        .env_remove("CRAFTLAB_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    out
}

fn ok(args: &[&str]) -> Output {
    let out = craftlab(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn smoke_train(dir: &Path, method: &str) {
    let cfg = repo("configs/smoke.toml");
    ok(&["train", "--config", path(&cfg), "--method", method, "--rounds", "2", "--seed", "1", "--out-dir", path(dir)]);
}

#[test]
fn train_writes_checkpoints_metrics_and_config() {
    let dir = tempfile::tempdir().unwrap();
    smoke_train(dir.path(), "craft");
    for f in ["checkpoint_round1.json", "checkpoint_round2.json", "pretrained_checkpoint.json", "resolved_config.toml"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    assert!(!dir.path().join("checkpoint_round3.json").exists());
    let log = std::fs::read_to_string(dir.path().join(report::METRICS_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);

    // the resolved config reproduces the run
    let again = tempfile::tempdir().unwrap();
    let resolved = dir.path().join(report::RESOLVED_CONFIG);
    ok(&["train", "--config", path(&resolved), "--out-dir", path(again.path())]);
    assert_eq!(log, std::fs::read_to_string(again.path().join(report::METRICS_FILE)).unwrap());
}

#[test]
fn rerun_gives_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    smoke_train(a.path(), "grpo");
    smoke_train(b.path(), "grpo");
    let read = |d: &Path| std::fs::read(d.join(report::METRICS_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

fn component_keys(dir: &Path) -> Vec<String> {
    let log = std::fs::read_to_string(dir.join(report::METRICS_FILE)).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    let mut keys: Vec<String> = first["epochs"][0].as_object().unwrap().keys().filter(|k| k.starts_with("l_")).cloned().collect();
    keys.sort();
    keys
}

#[test]
fn metric_components_follow_the_method() {
    let expected = [
        ("ppo", vec!["l_policy", "l_value"]),
        ("grpo", vec!["l_cp", "l_dist", "l_kl"]),
        ("craft", vec!["l_cp", "l_dist", "l_gr", "l_kl"]),
        ("reinforcepp", vec!["l_policy"]),
    ];
    for (method, keys) in expected {
        let dir = tempfile::tempdir().unwrap();
        smoke_train(dir.path(), method);
        assert_eq!(component_keys(dir.path()), keys, "{method}");
    }
}

#[test]
fn out_dir_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo("configs/smoke.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_craftlab"))
        .args(["train", "--config", path(&cfg), "--rounds", "1"])
        .env("CRAFTLAB_OUT", dir.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("checkpoint_round1.json").is_file());

    let out = craftlab(&["train", "--config", path(&cfg), "--rounds", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("CRAFTLAB_OUT"));
}

#[test]
fn bad_config_keys_are_diagnosed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[objectives]\nlambda_cq = 1.0\n").unwrap();
    let out = craftlab(&["train", "--config", path(&cfg), "--out-dir", path(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lambda_cq"), "{err}");
    assert!(!dir.path().join(report::METRICS_FILE).exists());
}

fn empty_road_checkpoint(dir: &Path) -> PathBuf {
    let cfg = repo("configs/empty_road.toml");
    ok(&["train", "--config", path(&cfg), "--out-dir", path(dir)]);
    dir.join(report::PRETRAINED_CHECKPOINT)
}

#[test]
fn expert_clone_drives_the_empty_road_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = empty_road_checkpoint(dir.path());
    let cfg = repo("configs/empty_road.toml");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["eval", "--config", path(&cfg), "--checkpoint", path(&ckpt), "--out-dir", path(out)]);
    }
    let json = std::fs::read_to_string(a.join(report::EVAL_JSON)).unwrap();
    assert_eq!(json, std::fs::read_to_string(b.join(report::EVAL_JSON)).unwrap());
    let report: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(report.aggregate.episodes, 10);
    assert_eq!(report.aggregate.success_rate, 100.0);
    assert_eq!(report.aggregate.infraction_score, 1.0);

    // CSV rows carry the same values as the JSON report
    let mut rows = csv::Reader::from_path(a.join(report::EVAL_CSV)).unwrap();
    let parsed: Vec<ScenarioReport> = rows.deserialize().map(Result::unwrap).collect();
    let mut expected = report.per_scenario.clone();
    expected.push(report.aggregate.clone());
    assert_eq!(parsed, expected);
}

#[test]
fn zero_episodes_gives_an_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = empty_road_checkpoint(dir.path());
    let cfg = repo("configs/empty_road.toml");
    ok(&["eval", "--config", path(&cfg), "--checkpoint", path(&ckpt), "--episodes", "0", "--out-dir", path(dir.path())]);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join(report::EVAL_JSON)).unwrap()).unwrap();
    assert!(report.episodes.is_empty());
    assert_eq!(report.aggregate.episodes, 0);
}

#[test]
fn eval_rejects_a_foreign_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = empty_road_checkpoint(dir.path());
    let cfg = dir.path().join("vocab.toml");
    std::fs::write(&cfg, "[vocab]\ntarget_speeds = [0.0, 3.0, 6.0, 9.0, 12.0]\n").unwrap();
    let out = craftlab(&["eval", "--config", path(&cfg), "--checkpoint", path(&ckpt), "--episodes", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));
}

#[test]
fn snapshot_of_a_checkpoint_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = empty_road_checkpoint(dir.path());
    let c = path(&ckpt);
    ok(&["snapshot-dist", "--checkpoint", c, "--checkpoint", c, "--step", "7", "--out-dir", path(dir.path())]);
    let mut rdr = csv::Reader::from_path(dir.path().join("dist_step7.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    assert_eq!(header.len(), 6);
    let (mut s0, mut s1) = (0.0, 0.0);
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let (p0, p1): (f64, f64) = (rec[4].parse().unwrap(), rec[5].parse().unwrap());
        assert_eq!(p0, p1);
        s0 += p0;
        s1 += p1;
    }
    assert!((s0 - 1.0).abs() < 1e-12 && (s1 - 1.0).abs() < 1e-12);

    let out = craftlab(&["snapshot-dist", "--checkpoint", c, "--step", "100000"]);
    assert!(!out.status.success());
}

#[test]
fn theory_check_json_has_every_statement() {
    let out = ok(&["theory-check", "--seeds", "1", "--json"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r["passed"] == Value::Bool(true) && r["worst"].is_number()));

    let out = ok(&["theory-check", "--seeds", "1"]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.matches("PASS").count(), 6, "{table}");
}
