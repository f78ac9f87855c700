use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hpz_sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hpz-sim")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_report_and_loss_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = hpz_sim(&["run", "--hpz", "fixed", "--steps", "4", "--trace", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("verdict: stable"), "{stdout}");
    assert!(stdout.contains("hazards: 0"));

    let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["verdict"]["status"], "stable");
    assert_eq!(report["steps"].as_array().unwrap().len(), 4);
    let trace = fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert!(trace.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
}

#[test]
fn report_json_replays_as_config() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    assert!(hpz_sim(&["run", "--hpz", "stock", "--steps", "3", "--seed", "5", "--out", path(&first)]).status.success());
    let second = dir.path().join("b");
    let report = first.join("report.json");
    assert!(hpz_sim(&["run", "--config", path(&report), "--out", path(&second)]).status.success());
    assert_eq!(fs::read(first.join("loss.csv")).unwrap(), fs::read(second.join("loss.csv")).unwrap());
}

#[test]
fn stock_divergence_is_expected_and_exits_zero() {
    let out = hpz_sim(&["run", "--hpz", "stock", "--steps", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("NaN at step 1"), "{stdout}");
}

#[test]
fn unexpected_divergence_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.toml");
    fs::write(&cfg, "lr = 1e8\nsteps = 20\nwindow = 5\nhpz = \"off\"\n").unwrap();
    let out = hpz_sim(&["run", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn config_errors_exit_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "prefetch_dept = 2\n").unwrap();
    let out = hpz_sim(&["run", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prefetch_dept"));

    fs::write(&cfg, "devices_per_node = 0\n").unwrap();
    let out = hpz_sim(&["run", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("devices_per_node"));

    let missing = dir.path().join("missing.toml");
    assert_eq!(hpz_sim(&["run", "--config", path(&missing)]).status.code(), Some(2));
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(hpz_sim(&["race-hunt", "--trials", "0"]).status.code(), Some(2));
    assert_eq!(hpz_sim(&["run", "--hpz", "sideways"]).status.code(), Some(2));
    assert_eq!(hpz_sim(&["run", "--policy", "lucky"]).status.code(), Some(2));
}

#[test]
fn sweeps_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = hpz_sim(&["sweep-stability", "--steps", "6", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("stability.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("model,params,without_hpz,with_hpz,modified_hpz"));
    for row in lines {
        assert!(row.ends_with(",✓,×,✓"), "{row}");
    }

    let out = hpz_sim(&["sweep-throughput", "--steps", "2", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(dir.path().join("throughput.csv")).unwrap().lines().count(), 4);
}

#[test]
fn race_hunt_counts_divergences() {
    let dir = tempfile::tempdir().unwrap();
    let out = hpz_sim(&["race-hunt", "--hpz", "fixed", "--steps", "3", "--trials", "5", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    let hunt: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("race_hunt.json")).unwrap()).unwrap();
    assert_eq!(hunt["trials"], 5);
    assert_eq!(hunt["diverged"], 0);
}
