use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use redlight_cli::batch::SUMMARY_HEADER;
use redlight_core::sim::{ScenarioConfig, ScenarioId};

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn redlight(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_redlight")).args(args).output().expect("binary runs")
}

fn write_manifest(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("manifest.json");
    fs::write(&path, body).unwrap();
    path
}

fn copy_scenario(dir: &Path, name: &str) {
    fs::copy(scenarios_dir().join(name), dir.join(name)).unwrap();
}

fn count_with_suffix(dir: &Path, suffix: &str) -> usize {
    fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix)).count()
}

#[test]
fn shipped_scenarios_are_the_canonical_ones() {
    for id in ScenarioId::ALL {
        let text = fs::read_to_string(scenarios_dir().join(format!("{}.json", id.as_str()))).unwrap();
        assert_eq!(ScenarioConfig::from_json(&text).unwrap(), ScenarioConfig::canonical(id));
    }
}

#[test]
fn canonical_manifest_writes_eighteen_traces() {
    let out = tempfile::tempdir().unwrap();
    let manifest = scenarios_dir().join("canonical.json");
    let res = redlight(&["run", "--manifest", manifest.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(count_with_suffix(out.path(), ".trace.csv"), 18);
    assert_eq!(count_with_suffix(out.path(), ".metrics.json"), 18);
    let summary = fs::read_to_string(out.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next(), Some(SUMMARY_HEADER));
    assert_eq!(summary.lines().count(), 7);
    assert!(out.path().join("summary.json").exists());

    let report = redlight(&["report", "--dir", out.path().to_str().unwrap()]);
    assert_eq!(report.status.code(), Some(0));
    let text = String::from_utf8(report.stdout).unwrap();
    assert!(text.contains("solo-red,0,"));
    assert!(text.contains("# 6 pairs"));
}

#[test]
fn repeat_gives_one_row_per_seed_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    copy_scenario(dir.path(), "solo-red.json");
    let manifest = write_manifest(dir.path(), r#"{"scenarios": ["solo-red.json"], "repeat": 10, "seeds": "0..9", "engines": ["advisory"]}"#);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let res = redlight(&["run", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(res.status.code(), Some(0));
        fs::read_to_string(out.join("summary.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a.lines().count(), 11);
    assert_eq!(a, run("b"));
}

#[test]
fn empty_manifest_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), r#"{"scenarios": []}"#);
    let res = redlight(&["run", "--manifest", manifest.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(redlight(&["run"]).status.code(), Some(1));
    assert_eq!(redlight(&["run", "--manifest", manifest.to_str().unwrap(), "--seeds", "4..1"]).status.code(), Some(1));
}

#[test]
fn missing_files_are_io_errors_and_the_batch_continues() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(redlight(&["run", "--manifest", missing.to_str().unwrap()]).status.code(), Some(3));

    copy_scenario(dir.path(), "solo-red.json");
    let manifest = write_manifest(dir.path(), r#"{"scenarios": ["absent.json", "solo-red.json"], "engines": ["baseline"]}"#);
    let out = dir.path().join("o");
    let res = redlight(&["run", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3));
    assert_eq!(count_with_suffix(&out, ".trace.csv"), 1);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["failures"][0]["file"], "absent.json");
}

#[test]
fn compliant_violation_trips_the_gate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig::canonical(ScenarioId::SoloRed);
    cfg.ego.position_m = -30.0;
    cfg.duration_s = 5.0;
    fs::write(dir.path().join("late.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    let manifest = write_manifest(dir.path(), r#"{"scenarios": ["late.json"], "perturb": false}"#);
    let out = dir.path().join("o");
    let res = redlight(&["run", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap(), "--engine", "advisory"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("late__advisory__seed0"));
}

#[test]
fn report_requires_pairs() {
    let dir = tempfile::tempdir().unwrap();
    copy_scenario(dir.path(), "solo-red.json");
    let manifest = write_manifest(dir.path(), r#"{"scenarios": ["solo-red.json"]}"#);
    let out = dir.path().join("o");
    let res = redlight(&["run", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap(), "--engine", "advisory"]);
    assert_eq!(res.status.code(), Some(0));
    assert_eq!(redlight(&["report", "--dir", out.to_str().unwrap()]).status.code(), Some(1));
}
