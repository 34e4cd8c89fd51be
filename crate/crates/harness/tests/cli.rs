use std::path::Path;
use std::process::Command;

use dbf_base::envs::{EnvConfig, LgssmConfig};
use dbf_harness::config::{ExperimentConfig, FilterSpec};

fn dbf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dbf"))
}

fn write_kf_config(dir: &Path) -> std::path::PathBuf {
    let env = EnvConfig::Lgssm(LgssmConfig::scalar(0.9, 0.1, 1.0, 0.5));
    let mut c = ExperimentConfig::new("cli", env, FilterSpec::Kf);
    c.steps = 20;
    c.test.count = 2;
    let p = dir.join("cfg.json");
    std::fs::write(&p, c.to_json()).unwrap();
    p
}

#[test]
fn presets_are_listed() {
    let out = dbf().arg("presets").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("pendulum-desk") && text.contains("lorenz96-pf"));
}

#[test]
fn missing_config_file_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dbf().args(["eval", "--config"]).arg(dir.path().join("nope.json")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_preset_exits_with_config_code() {
    let out = dbf().args(["eval", "--preset", "no-such-thing"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[config]"));
}

#[test]
fn malformed_json_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{ \"schema_version\": 1, ").unwrap();
    let out = dbf().args(["eval", "--config"]).arg(&p).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_writes_report_and_honours_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_kf_config(dir.path());
    let out_dir = dir.path().join("results");
    let out = dbf().args(["eval", "--threads", "1", "--seed", "5", "--config"]).arg(&cfg).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = dbf_harness::report::MetricReport::read_json(&out_dir.join("report.json")).unwrap();
    assert_eq!(report.seed, 5);
    assert!(String::from_utf8(out.stdout).unwrap().contains("kf"));
}

#[test]
fn generate_writes_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_kf_config(dir.path());
    let out = dbf().args(["generate", "--count", "3", "--steps", "7", "--stem", "data", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let b = dbf_base::envs::TrajectoryBatch::read(dir.path(), "data").unwrap();
    assert_eq!((b.count(), b.steps()), (3, 7));
}

#[test]
fn compare_without_comparison_filters_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_kf_config(dir.path());
    let out = dbf().args(["compare", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
