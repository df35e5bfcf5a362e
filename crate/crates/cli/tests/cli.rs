use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rdcontrol"))
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

/// Rows of `sweep.csv` as maps from column name to cell.
fn sweep_rows(dir: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let text = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(String::from)).collect())
        .collect()
}

const HEAT: &str = "[system]\nn = 1\nm = 1\nd = [1.0]\na = [0.0]\nb = [1.0]\nomega = [0.2, 0.4]\n";

#[test]
fn obstruction_config_reports_infeasibility() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["run", shipped("obstruction_counterexample.toml").to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(tmp.path());
    let tasks = m["tasks"].as_array().unwrap();
    let obs = tasks.iter().find(|t| t["kind"] == "obstruction").unwrap();
    assert_eq!(obs["status"], "infeasible");
    assert_eq!(obs["metrics"]["obstructed"], true);
    assert_eq!(obs["metrics"]["lower_bound"].as_f64(), Some(3.0));
    assert_eq!(obs["metrics"]["upper_bound"].as_f64(), Some(2.0));
    assert!(tmp.path().join(obs["dir"].as_str().unwrap()).join("report.json").exists());
}

#[test]
fn identity_demo_meets_terminal_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["run", shipped("identity_staircase_demo.toml").to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(tmp.path());
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    let st = m["tasks"].as_array().unwrap().iter().find(|t| t["kind"] == "staircase_identity").unwrap();
    assert_eq!(st["status"], "ok");
    assert!(st["metrics"]["terminal_error"].as_f64().unwrap() <= 1e-3);
    assert!(st["metrics"]["min_state"].as_f64().unwrap() >= -1e-6);
    for a in st["artifacts"].as_array().unwrap() {
        assert!(tmp.path().join(a.as_str().unwrap()).exists(), "missing {a}");
    }
    let traj = std::fs::read_to_string(tmp.path().join(st["dir"].as_str().unwrap()).join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("time,min_0,min_1,l2_0,l2_1\n"));
}

#[test]
fn empty_task_list_writes_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "empty.toml", HEAT);
    let dir = tmp.path().join("out");
    let out = run(&["run", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(manifest(&dir)["tasks"].as_array().unwrap().len(), 0);
}

#[test]
fn unknown_key_is_rejected_with_context() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "typo.toml", &format!("{HEAT}diffusivity = 2.0\n"));
    let dir = tmp.path().join("out");
    let out = run(&["run", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("diffusivity") && err.contains("line 8"), "{err}");
    assert!(!dir.exists(), "nothing runs before validation");
}

#[test]
fn semantic_errors_are_validation_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        format!("{HEAT}[[tasks]]\nkind = \"steer\"\ntau = 0.5\n"),
        format!("{HEAT}[[tasks]]\nkind = \"staircase_general\"\nfloor = \"relaxed\"\n"),
        "[system]\nn = 2\nm = 1\nd = [1.0]\na = [0.0]\nb = [1.0]\nomega = [0.2, 0.4]\n".to_string(),
        format!("{HEAT}[[tasks]]\nkind = \"warp\"\n"),
    ];
    for (i, body) in cases.iter().enumerate() {
        let cfg = write(tmp.path(), &format!("c{i}.toml"), body);
        let out = run(&["run", cfg.to_str().unwrap(), "--out", tmp.path().join(format!("o{i}")).to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "case {i}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn tau_sweep_norms_decrease() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "sweep",
        shipped("cost_blowup.toml").to_str().unwrap(),
        "--param",
        "tasks.0.tau",
        "--values",
        "0.05,0.1,0.2,0.4",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let norms: Vec<f64> = sweep_rows(tmp.path())
        .into_iter()
        .filter(|r| r["kind"] == "steer")
        .map(|r| r["control_norm"].parse().unwrap())
        .collect();
    assert_eq!(norms.len(), 4);
    assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
}

#[test]
fn epsilon_sweep_steps_do_not_decrease() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "sweep",
        shipped("general_staircase.toml").to_str().unwrap(),
        "--param",
        "epsilon",
        "--values",
        "0.2,0.1,0.05",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = sweep_rows(tmp.path());
    let steps: Vec<u64> = rows.iter().map(|r| r["steps"].parse().unwrap()).collect();
    assert_eq!(steps.len(), 3);
    assert!(steps.windows(2).all(|w| w[1] >= w[0]), "{steps:?}");
    assert!(rows.iter().all(|r| r["status"] == "ok"));
}

#[test]
fn empty_sweep_runs_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "sweep",
        shipped("general_staircase.toml").to_str().unwrap(),
        "--param",
        "epsilon",
        "--values",
        "",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(sweep_rows(tmp.path()).is_empty());
    let subdirs = std::fs::read_dir(tmp.path()).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(subdirs, 0);
}

#[test]
fn unaddressable_sweep_parameter_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "sweep",
        shipped("general_staircase.toml").to_str().unwrap(),
        "--param",
        "horizon",
        "--values",
        "1.0",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = shipped("random_free.toml");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let out = run(&["run", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let files = ["02_free/trajectory.csv", "02_free/report.json", "00_validate/report.json", "01_kalman/report.json"];
    for f in files {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn seed_override_changes_random_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = shipped("random_free.toml");
    let traj = |seed: &str, dir: &str| {
        let d = tmp.path().join(dir);
        let out = run(&["run", cfg.to_str().unwrap(), "--seed", seed, "--out", d.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
        assert!(manifest(&d)["overrides"].as_str().unwrap().contains(&format!("seed=Some({seed})")));
        std::fs::read(d.join("02_free/trajectory.csv")).unwrap()
    };
    assert_ne!(traj("1", "s1"), traj("2", "s2"));
}

#[test]
fn modes_override_reaches_the_solver() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = shipped("identity_staircase_demo.toml");
    let d = tmp.path().join("o");
    let out = run(&["run", cfg.to_str().unwrap(), "--modes", "16", "--out", d.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("02_staircase_identity/report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert!(report["staircase"]["terminal_error"].as_f64().unwrap() <= 1e-3);
    let bad = run(&["run", cfg.to_str().unwrap(), "--modes", "4", "--out", d.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2), "j_ctrl = 8 cannot exceed the propagated modes");
}
