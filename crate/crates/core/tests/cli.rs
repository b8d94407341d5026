use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use polrouter::polmath::ProcessMatrix;
use polrouter::router::SerVisibility;
use polrouter::tomography::{simulate_tomography, Sampling};
use serde_json::Value;

fn polrouter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polrouter")).args(args).output().expect("binary runs")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let mut all = vec!["run"];
    all.extend_from_slice(args);
    all.extend(["--out", dir.to_str().unwrap()]);
    polrouter(&all)
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn unknown_experiment_is_a_usage_error() {
    let out = polrouter(&["run", "teleport"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("switching-curve"));
}

#[test]
fn invalid_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("unknown.toml", "[run]\nsede = 3\n"),
        ("range.toml", "[detector]\nefficiency = 1.5\n"),
        ("syntax.toml", "[run\n"),
    ];
    for (name, text) in cases {
        let path = dir.path().join(name);
        fs::write(&path, text).unwrap();
        let out = run_in(dir.path(), &["loss-budget", "--config", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let missing = run_in(dir.path(), &["loss-budget", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(polrouter(&["run", "loss-budget", "--format", "xml"]).status.code(), Some(2));
}

#[test]
fn analysis_failure_exits_with_one() {
    // Detectors that see nothing leave the switching curve without counts.
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("blind.toml");
    fs::write(&cfg, "[detector]\nefficiency = 0.0\ndark_rate = 0.0\n").unwrap();
    let out = run_in(dir.path(), &["switching-curve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("analysis"));
}

#[test]
fn loss_budget_writes_table_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["loss-budget"]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("loss_budget.csv")).unwrap();
    assert!(csv.starts_with("element,loss_db\n"));
    let s = summary(dir.path());
    assert_eq!(s["experiment"], "loss-budget");
    for key in ["metrics", "config_echo", "seed", "versions"] {
        assert!(s.get(key).is_some(), "summary lacks {key}");
    }
    assert!((s["metrics"]["total_db"].as_f64().unwrap() - 0.057).abs() < 1e-3);
    assert_eq!(s["config_echo"]["router"]["mode_overlap"], 0.995235470367519);
}

#[test]
fn same_seed_gives_identical_csv() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for name in ["switching-curve", "noon-fringe", "rise-fall"] {
        assert!(run_in(a.path(), &[name, "--seed", "17"]).status.success());
        assert!(run_in(b.path(), &[name, "--seed", "17"]).status.success());
        assert!(run_in(c.path(), &[name, "--seed", "18"]).status.success());
        let file = format!("{}.csv", name.replace('-', "_"));
        let ra = fs::read(a.path().join(&file)).unwrap();
        assert_eq!(ra, fs::read(b.path().join(&file)).unwrap(), "{file}");
        assert_ne!(ra, fs::read(c.path().join(&file)).unwrap(), "{file}");
    }
}

#[test]
fn summary_metrics_satisfy_duality() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_in(dir.path(), &["switching-curve", "--seed", "5"]).status.success());
    let s = summary(dir.path());
    for row in s["metrics"]["table"].as_array().unwrap() {
        let (e, v) = (row["e_db"].as_f64().unwrap(), row["v1"].as_f64().unwrap());
        assert!((SerVisibility::from_visibility(v).e_db - e).abs() < 1e-9);
        assert!((22.0..=29.0).contains(&e), "{row}");
    }
}

#[test]
fn json_format_and_analytic_flag() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_in(dir.path(), &["noon-fringe", "--analytic", "--format", "json"]).status.success());
    let table: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("noon_fringe.json")).unwrap()).unwrap();
    let rows = table.as_array().unwrap();
    assert_eq!(rows.len(), 30);
    assert!(rows[0]["hwp_deg"].is_number() && rows[0]["coincidence_rate"].is_number());
    let s = summary(dir.path());
    assert_eq!(s["analytic"], true);
    assert!((s["metrics"]["input"]["v2"].as_f64().unwrap() - 0.968).abs() < 1e-3);
}

#[test]
fn dumped_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let dumped = polrouter(&["config"]);
    assert!(dumped.status.success());
    let path = dir.path().join("default.toml");
    fs::write(&path, &dumped.stdout).unwrap();
    let out = run_in(dir.path(), &["stability", "--config", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(summary(dir.path())["metrics"]["synthetic"], true);
}

#[test]
fn tomography_then_deconvolve_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_tomography(&ProcessMatrix::identity(), 10_000, Sampling::Analytic).unwrap();
    let csv = dir.path().join("counts.csv");
    fs::write(&csv, data.to_csv()).unwrap();
    let chi = dir.path().join("chi.json");
    let out = polrouter(&["tomography", csv.to_str().unwrap(), "--out", chi.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(&chi).unwrap()).unwrap();
    assert!(report["chi"]["re"].is_array(), "{report}");
    assert!(report["fidelity_to_identity"].as_f64().unwrap() > 1.0 - 1e-4);

    let out = polrouter(&["deconvolve", chi.to_str().unwrap(), chi.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let broken = dir.path().join("broken.csv");
    fs::write(&broken, "input_label,projector_label,counts,shots\nH,Q,1,2\n").unwrap();
    assert_eq!(polrouter(&["tomography", broken.to_str().unwrap()]).status.code(), Some(2));
}
