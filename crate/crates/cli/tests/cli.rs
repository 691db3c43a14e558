use std::process::{Command, Output};

fn discard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_discard")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

#[test]
fn eval_delta_v_exponential() {
    let o = discard(&["eval", "delta_v", "--profile", "exp:lambda=1", "--xi", "0", "--x", "0"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "0.125");
}

#[test]
fn eval_flat_curvature() {
    let o = discard(&["eval", "curvature", "--profile", "const:b=1", "--x", "0"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "0");
}

#[test]
fn eval_matches_library_to_printed_precision() {
    use discard_core::geometry::{RadiusProfile, TubeGeometry};
    use discard_core::kernels::{delta_v_eff_from_b, PhysicsConstants};
    let o = discard(&["eval", "delta_v", "--profile", "tanh:amp=0.2", "--xi", "0.25", "--d", "2", "--x", "-0.7"]);
    assert!(o.status.success());
    let printed: f64 = stdout(&o).parse().unwrap();
    let g = TubeGeometry::new(RadiusProfile::tanh_step(0.2).unwrap(), -20.0, 20.0).unwrap();
    let c = PhysicsConstants::natural().with_xi(0.25);
    let lib = delta_v_eff_from_b(&g, &c, -0.7, 2).unwrap();
    assert_eq!(printed, format!("{lib:.11e}").parse::<f64>().unwrap());
}

#[test]
fn eval_classical_potential() {
    let o = discard(&["eval", "v_cl", "--profile", "const:b=2", "--e-phi", "2", "--x", "1"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "0.5");
}

#[test]
fn eval_sigma_flat() {
    let o = discard(&["eval", "sigma", "--x", "0", "--xp", "0.3", "--theta", "0.4"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "0.125");
}

#[test]
fn validate_rejects_kinetic_phase_violation() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(
        &p,
        r#"{"name": "coarse", "scenario": {"kind": "slicing_convergence", "n_x": 21, "ns": [64, 128, 256]},
            "tolerances": {"free_max_rel_error": 1e-6}}"#,
    )
    .unwrap();
    let o = discard(&["validate", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("kinetic phase rule") && err.contains("/scenario/n_x"), "{err}");
}

#[test]
fn validate_reports_json_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("typo.json");
    std::fs::write(&p, r#"{"name": "t", "scenario": {"kind": "xi_scan", "xi": "zero"}, "tolerances": {}}"#).unwrap();
    let o = discard(&["validate", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/scenario/xi"));
}

#[test]
fn unknown_scenario_is_usage_error() {
    let o = discard(&["run", "no_such_scenario"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("built-ins"));
    assert_eq!(discard(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn list_shows_builtins() {
    let o = discard(&["list"]);
    assert!(o.status.success());
    let s = stdout(&o);
    for name in ["flat_baseline", "brute_force_equivalence", "history_equivalence", "geometry_identities"] {
        assert!(s.contains(name), "{s}");
    }
}

#[test]
fn run_writes_report_and_reflects_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = discard(&["run", "xi_scan", "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("xi_scan_report.json").exists());
    assert!(out.join("xi_scan_delta_v.csv").exists());
    // An impossible tolerance fails the criterion, exit code 1.
    let p = dir.path().join("strict.json");
    std::fs::write(
        &p,
        r#"{"name": "strict", "profile": {"kind": "exp_tanh", "parameters": {"amp": 0.3}},
            "scenario": {"kind": "geometry_identities", "x_min": -4, "x_max": 4, "pairs": [[0.2, 0.5, 0.3]],
                         "h": [0.4, 0.2, 0.1], "direction": [0.3, 1.0, 1.0]},
            "tolerances": {"taylor_slope": 100}}"#,
    )
    .unwrap();
    let o = discard(&["run", p.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}
