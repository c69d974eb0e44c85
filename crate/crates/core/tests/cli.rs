use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

mod common;
use common::fixture_path;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ofo-safety"))
}

fn write_scenario(dir: &Path, name: &str, body: Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn two_bus_for() -> Value {
    json!({
        "grid": fixture_path("two_bus.json"),
        "controller": {"alpha": 0.2},
        "schedule": [{"p": 0.5, "q": 0.0}],
        "sweep": {"n_angles": 12},
        "oracle_samples": 0
    })
}

fn four_bus_mc(n_trials: usize) -> Value {
    json!({
        "grid": fixture_path("four_bus_ring.json"),
        "controller": {"alpha": 0.11294, "max_iterations": 200},
        "schedule": [{"p": 0.17, "q": 0.05}],
        "sweep": {"n_angles": 24},
        "noise": {"seed": 5},
        "n_trials": n_trials,
        "oracle_samples": 0
    })
}

#[test]
fn for_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(dir.path(), "for.json", two_bus_for());
    let out = dir.path().join("out");
    let o = run(&["for", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("for.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("for_summary.json")).unwrap()).unwrap();
    assert!(summary.is_object());
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut few = two_bus_for();
    few["sweep"]["n_angles"] = json!(2);
    let mut unknown = two_bus_for();
    unknown["colour"] = json!("blue");
    let mut no_grid = two_bus_for();
    no_grid["grid"] = json!("does_not_exist.json");
    for (name, body) in [("few.json", few), ("unknown.json", unknown), ("nogrid.json", no_grid)] {
        let cfg = write_scenario(dir.path(), name, body);
        let o = run(&["for", s(&cfg), "--out", s(&dir.path().join("o"))]);
        assert_eq!(o.status.code(), Some(1), "{name}");
        assert!(!o.stderr.is_empty());
    }
    let missing = dir.path().join("missing.json");
    assert_eq!(run(&["run", s(&missing)]).status.code(), Some(1));
    let cfg = write_scenario(dir.path(), "ok.json", two_bus_for());
    assert_eq!(run(&["for", s(&cfg), "--jobs", "0"]).status.code(), Some(1));
    assert_eq!(run(&["bogus", s(&cfg)]).status.code(), Some(1));
    assert_eq!(run(&["for"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn divergent_grid_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let text =
        std::fs::read_to_string(fixture_path("two_bus.json")).unwrap().replace(r#""p_mw": 50"#, r#""p_mw": 2000"#);
    assert_ne!(text, std::fs::read_to_string(fixture_path("two_bus.json")).unwrap());
    let grid = dir.path().join("heavy.json");
    std::fs::write(&grid, text).unwrap();
    let mut body = two_bus_for();
    body["grid"] = json!(s(&grid));
    let cfg = write_scenario(dir.path(), "heavy_for.json", body);
    for cmd in ["for", "run", "mc"] {
        let o = run(&[cmd, s(&cfg), "--out", s(&dir.path().join(cmd))]);
        assert_eq!(o.status.code(), Some(2), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = four_bus_mc(6);
    body["noise"] = json!({"load_sigma": {"household": 0.002}, "meas_bounds": [-0.01, 0.01], "sens_bounds": [-0.05, 0.05], "seed": 9});
    let cfg = write_scenario(dir.path(), "mc.json", body);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["mc", s(&cfg), "--out", s(&a), "--jobs", "1"]).status.code(), Some(0));
    assert_eq!(run(&["mc", s(&cfg), "--out", s(&b), "--jobs", "3"]).status.code(), Some(0));
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 6);
    for name in names {
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
    // a different seed changes the ensemble
    let c = dir.path().join("c");
    assert_eq!(run(&["mc", s(&cfg), "--out", s(&c), "--seed", "10"]).status.code(), Some(0));
    assert_ne!(std::fs::read(a.join("density_all.csv")).unwrap(), std::fs::read(c.join("density_all.csv")).unwrap());
}

#[test]
fn noise_free_ensemble_is_robust() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(dir.path(), "mc0.json", four_bus_mc(3));
    let out = dir.path().join("out");
    let o = run(&["mc", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["critical_fraction"], json!(0.0));
    assert_eq!(summary["robust"], json!(true));
    assert_eq!(summary["n_trials"], json!(3));
    assert_eq!(summary["convergence_rate"], json!(1.0));
}

#[test]
fn failure_manifest_lists_injected_trials() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = four_bus_mc(5);
    body["inject_failures"] = json!([1, 4]);
    let cfg = write_scenario(dir.path(), "inj.json", body);
    let out = dir.path().join("out");
    assert_eq!(run(&["mc", s(&cfg), "--out", s(&out)]).status.code(), Some(0));
    let failures: Value = serde_json::from_str(&std::fs::read_to_string(out.join("failures.json")).unwrap()).unwrap();
    let trials: Vec<u64> = failures.as_array().unwrap().iter().map(|f| f["trial"].as_u64().unwrap()).collect();
    assert_eq!(trials, vec![1, 4]);

    let mut all = four_bus_mc(2);
    all["inject_failures"] = json!([0, 1]);
    let cfg = write_scenario(dir.path(), "all.json", all);
    assert_eq!(run(&["mc", s(&cfg), "--out", s(&dir.path().join("all"))]).status.code(), Some(2));
}

#[test]
fn run_writes_a_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(dir.path(), "run.json", four_bus_mc(1));
    let out = dir.path().join("out");
    let o = run(&["run", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let verdict: Value = serde_json::from_str(&std::fs::read_to_string(out.join("verdict.json")).unwrap()).unwrap();
    assert_eq!(verdict["class"], json!("Safe"));
    assert_eq!(verdict["n_targets_reached"], json!(1));
    assert!(verdict["config_hash"].as_str().unwrap().len() == 64);
    assert!(std::fs::read_to_string(out.join("trajectory.csv")).unwrap().starts_with("trajectory,k,"));
}
