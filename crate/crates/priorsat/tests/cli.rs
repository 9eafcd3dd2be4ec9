//! Black-box tests of the `priorsat` binary: exit codes, key output values,
//! emitted files, and run-to-run determinism.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_priorsat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn saturation_fed_batch_reports_the_pump_saturation_volume() {
    let out = run(&["saturation", "--model", "fedbatch"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(doc["branch"], "vertical");
    let tau = doc["tau_star"].as_f64().unwrap();
    assert!((tau - 1.2).abs() <= 1e-9, "tau_star = {tau}");
}

#[test]
fn saturation_mri_horizontal_matches_the_closed_form() {
    let out = run(&["saturation", "--model", "mri"]);
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let x1 = doc["x_star"][0].as_f64().unwrap();
    let x2 = doc["x_star"][1].as_f64().unwrap();
    assert!((x1 + 0.1125).abs() <= 1e-10 && (x2 + 0.125).abs() <= 1e-10);
}

#[test]
fn saturation_mri_vertical_branch_has_no_root_and_exits_2() {
    let out = run(&["saturation", "--model", "mri", "--branch", "vertical"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn prior_lift_reports_a_departure_volume_inside_the_locus() {
    let out = run(&["prior-lift", "--model", "fedbatch"]);
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let v_e = doc["lift"]["z_e"]["x"][1].as_f64().unwrap();
    assert!(v_e > 0.0 && v_e < 2.4, "v_e = {v_e}");
}

#[test]
fn invalid_params_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, br#"{"model":"fedbatch","params":{"v_max":1.0}}"#).unwrap();
    let out = run(&["prior-lift", "--params", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_model_exits_3() {
    let out = run(&["saturation", "--model", "pendulum"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unclassified_initial_condition_exits_2() {
    let out = run(&[
        "simulate", "--model", "fedbatch", "--x0", "5.0,5.0",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn certify_emits_true_verdicts_even_at_degraded_tolerance() {
    for extra in [&[][..], &["--rtol", "1e-4", "--atol", "1e-7"][..]] {
        for model in ["fedbatch", "mri"] {
            let mut args = vec!["certify", "--model", model];
            args.extend_from_slice(extra);
            let out = run(&args);
            assert!(out.status.success(), "{model} {extra:?}");
            let text = stdout(&out);
            assert!(!text.contains("\"verdict\": false"), "{model} {extra:?}: {text}");
        }
    }
}

fn assert_synthesis_files(dir: &Path) {
    for name in [
        "grid.csv",
        "locus.csv",
        "bridge.csv",
        "sigma_pi.csv",
        "manifest.json",
    ] {
        assert!(dir.join(name).is_file(), "missing {name}");
    }
}

#[test]
fn synthesis_writes_datasets_and_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let out = run(&[
            "synthesis",
            "--model",
            "fedbatch",
            "--grid",
            "9x9",
            "--seed",
            "42",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert_synthesis_files(dir);
    }
    for name in ["grid.csv", "locus.csv", "bridge.csv", "sigma_pi.csv", "manifest.json"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between identical runs");
    }
}

#[test]
fn mri_synthesis_small_grid_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "synthesis",
        "--model",
        "mri",
        "--grid",
        "7x7",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_synthesis_files(dir.path());
    let grid = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    assert!(grid.lines().any(|l| l.contains("B+b S0")), "{grid}");
}

#[test]
fn simulate_prints_the_classified_structure_and_arrival_time() {
    let out = run(&["simulate", "--model", "fedbatch", "--x0", "1.0,0.02"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("S B+b B-"), "{text}");
    assert!(text.contains("total_time"), "{text}");
}
