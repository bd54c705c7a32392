//! End-to-end tests of the `frmdp` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn frmdp() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_frmdp"));
    c.env_remove("FRMDP_TOL_OVERRIDE");
    c
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(name)
}

fn run(args: &[&str]) -> Output {
    frmdp().args(args).output().expect("binary runs")
}

#[test]
fn bandit_preset_passes_with_asserted_bounds() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&["run", preset("bandit.json").to_str().unwrap(), "--assert-bounds", "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("bandit_mu_0.2/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["passed"], true);
    let checks = summary["checks"].as_array().unwrap();
    assert!(checks.iter().any(|c| c["name"] == "bandit_closed_form" && c["measured"].as_f64().unwrap() <= 1e-6));
    // Every listed result maps to at least one executed check.
    let names: Vec<&str> = checks
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .chain(summary["bounds"].as_array().unwrap().iter().map(|b| b["name"].as_str().unwrap()))
        .collect();
    for entry in summary["traceability"].as_array().unwrap() {
        let listed = entry["checks"].as_array().unwrap();
        assert!(!listed.is_empty());
        assert!(listed.iter().all(|c| names.contains(&c.as_str().unwrap())));
    }
}

#[test]
fn halved_bound_fails_with_exit_one() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&["run", preset("negative_control.json").to_str().unwrap(), "--assert-bounds", "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    let csv = std::fs::read_to_string(out.path().join("negative_control_half_bound/bound_exponential_value_convergence.csv")).unwrap();
    assert!(csv.lines().next().unwrap() == "t,lhs,rhs,margin,holds");
    assert!(csv.contains(",false"));
}

#[test]
fn npg_preset_reports_exact_tracking() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&["run", preset("npg.json").to_str().unwrap(), "--assert-bounds", "--jobs", "2", "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("npg_one_hot/summary.json")).unwrap()).unwrap();
    let tracking = summary["checks"].as_array().unwrap().iter().find(|c| c["name"] == "npg_exact_tracking").unwrap();
    assert!(tracking["measured"].as_f64().unwrap() <= 1e-5);
    assert!(out.path().join("npg_one_hot/trajectory.svg").exists());
    let header = std::fs::read_to_string(out.path().join("npg_one_hot/trajectory.csv")).unwrap();
    assert!(header.starts_with("t,value_gap,approx_error_L1,bound_rhs,bound_holds,norm_theta,norm_w\n"));
}

#[test]
fn runs_are_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = preset("perturbation_sweep.json");
    for dir in [&a, &b] {
        let o = run(&["run", cfg.to_str().unwrap(), "--jobs", "3", "--out", dir.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
    }
    for name in ["perturbed_eps_0.01", "perturbed_eps_0.1", "perturbed_state_only"] {
        for file in ["trajectory.csv", "bound_stability.csv", "bound_stability_shifted.csv"] {
            let x = std::fs::read(a.path().join(name).join(file)).unwrap();
            let y = std::fs::read(b.path().join(name).join(file)).unwrap();
            assert!(x == y, "{name}/{file} differs between runs");
        }
    }
}

#[test]
fn gen_then_check_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen", "--states", "4", "--actions", "3", "--seed", "42"]);
    assert!(o.status.success());
    let again = run(&["gen", "--states", "4", "--actions", "3", "--seed", "42"]);
    assert_eq!(o.stdout, again.stdout);
    let path = dir.path().join("mdp.json");
    std::fs::write(&path, &o.stdout).unwrap();
    let c = run(&["check", path.to_str().unwrap(), "--solve"]);
    assert!(c.status.success());
    let text = String::from_utf8_lossy(&c.stdout);
    assert!(text.contains("valid: 4 states, 3 actions"));
    assert!(text.contains("V*(rho)"));
}

#[test]
fn check_reports_broken_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen", "--states", "2", "--actions", "2", "--seed", "1"]);
    let mut v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    v["P"][1][0][0] = serde_json::json!(0.9);
    v["P"][1][0][1] = serde_json::json!(0.9);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let c = run(&["check", path.to_str().unwrap()]);
    assert_eq!(c.status.code(), Some(2));
    let err = String::from_utf8_lossy(&c.stderr);
    assert!(err.contains("[1][0]") || err.contains("1, 0") || err.contains("s=1"), "{err}");
}

#[test]
fn config_errors_exit_two_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(&path, r#"{"name": "x", "flow": {"kind": "flow"}}"#).unwrap();
    let o = run(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.json"));
}

#[test]
fn relative_mdp_file_resolves_against_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen", "--states", "3", "--actions", "2", "--seed", "5"]);
    std::fs::write(dir.path().join("model.json"), &o.stdout).unwrap();
    let cfg = serde_json::json!({
        "name": "from_file",
        "mdp_source": {"file": "model.json"},
        "flow": {"kind": "flow", "t_end": 2.0, "dt": 0.01, "snapshot_every": 20},
        "diagnostics": ["exponential_convergence", "monotonicity"]
    });
    std::fs::write(dir.path().join("cfg.json"), cfg.to_string()).unwrap();
    let o = run(&["run", dir.path().join("cfg.json").to_str().unwrap(), "--assert-bounds"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("runs/from_file/summary.json").exists());
}

#[test]
fn bad_tolerance_override_is_rejected() {
    let o = frmdp()
        .env("FRMDP_TOL_OVERRIDE", r#"{"no_such_tolerance": 1.0}"#)
        .args(["gen", "--states", "2", "--actions", "2", "--seed", "1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn tolerance_override_is_reported_in_summary() {
    let out = tempfile::tempdir().unwrap();
    let o = frmdp()
        .env("FRMDP_TOL_OVERRIDE", r#"{"bound_rel": 1e-6}"#)
        .args(["run", preset("bandit.json").to_str().unwrap(), "--out", out.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("bandit_mu_0/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["tolerances"]["bound_rel"], 1e-6);
}
