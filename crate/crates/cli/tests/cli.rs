use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

const RF_MODEL: &str = r#""model": {"dim": 2, "K": {"re": [[0, 0.5], [0.5, 0]]}, "R": {"re": [[0, 0], [1, 0]]}}, "geometry": "thermodynamic""#;

struct Run {
    code: i32,
    stderr: String,
    output: Option<Vec<u8>>,
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn run(command: &str, config: &Path, output: &Path, extra: &[&str], env: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cmps-lab"));
    cmd.arg(command).arg("--config").arg(config).arg("--output").arg(output);
    cmd.args(extra);
    cmd.env_remove("CMPS_LAB_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        output: std::fs::read(output).ok(),
    }
}

fn rf_config(extra: &str) -> String {
    if extra.is_empty() {
        format!("{{{RF_MODEL}}}")
    } else {
        format!("{{{RF_MODEL}, {extra}}}")
    }
}

#[test]
fn steady_reports_rf_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &rf_config(""));
    let out = dir.path().join("o.json");
    let r = run("steady", &cfg, &out, &[], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let doc: Value = serde_json::from_slice(&r.output.unwrap()).unwrap();
    assert_eq!(doc["tool"], "cmps-lab");
    assert_eq!(doc["command"], "steady");
    assert!(doc["version"].is_string());
    assert_eq!(doc["config"]["model"]["dim"], 2);
    let rho00 = doc["result"]["rho_ss"][0][0].as_f64().unwrap();
    assert!((rho00 - 1.0 / 3.0).abs() < 1e-12);
    assert!((doc["result"]["gap"].as_f64().unwrap() - 0.5).abs() < 1e-10);
}

#[test]
fn unknown_key_is_validation_error_naming_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &rf_config(r#""separatoins": [1.0]"#));
    let out = dir.path().join("o.json");
    let r = run("correlate", &cfg, &out, &[], &[]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("separatoins"), "{}", r.stderr);
    assert!(r.output.is_none());
}

#[test]
fn unknown_nested_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"{"model": {"dim": 1, "K": {"re": [[0]]}, "R": {"re": [[1]], "imag": [[0]]}}, "geometry": "thermodynamic"}"#;
    let cfg = write_config(dir.path(), "c.json", body);
    let r = run("steady", &cfg, &dir.path().join("o.json"), &[], &[]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("imag"), "{}", r.stderr);
}

#[test]
fn unknown_tolerance_override_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &rf_config(""));
    let tol = write_config(dir.path(), "t.json", r#"{"zero_eigen": 1e-8}"#);
    let r = run(
        "steady",
        &cfg,
        &dir.path().join("o.json"),
        &["--tolerance-overrides", tol.to_str().unwrap()],
        &[],
    );
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("zero_eigen"), "{}", r.stderr);
}

#[test]
fn tolerance_overrides_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &rf_config(""));
    let tol = write_config(dir.path(), "t.json", r#"{"zero_eigenvalue": 1e-8}"#);
    let out = dir.path().join("o.json");
    let r = run("gap", &cfg, &out, &["--tolerance-overrides", tol.to_str().unwrap()], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let doc: Value = serde_json::from_slice(&r.output.unwrap()).unwrap();
    assert_eq!(doc["config"]["tolerances"]["zero_eigenvalue"].as_f64(), Some(1e-8));
}

#[test]
fn nonhermitian_k_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"{"model": {"dim": 2, "K": {"re": [[0, 1], [0, 0]]}, "R": {"re": [[0, 0], [1, 0]]}}, "geometry": "thermodynamic"}"#;
    let cfg = write_config(dir.path(), "c.json", body);
    let r = run("steady", &cfg, &dir.path().join("o.json"), &[], &[]);
    assert_eq!(r.code, 1, "{}", r.stderr);
}

#[test]
fn degenerate_fixed_space_is_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"{"model": {"dim": 2, "K": {"re": [[0, 0], [0, 0]]}, "R": {"re": [[0, 0], [0, 0]]}}, "geometry": "thermodynamic"}"#;
    let cfg = write_config(dir.path(), "c.json", body);
    let out = dir.path().join("o.json");
    let r = run("steady", &cfg, &out, &[], &[]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.output.is_none());
}

#[test]
fn trajectories_require_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &rf_config(r#""n_traj": 10, "bins": [0.1, 0.6]"#));
    let r = run("trajectories", &cfg, &dir.path().join("o.json"), &[], &[]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("seed"), "{}", r.stderr);
}

#[test]
fn negative_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &rf_config(r#""n_traj": 10, "seed": -3, "bins": [0.1, 0.6]"#),
    );
    let r = run("trajectories", &cfg, &dir.path().join("o.json"), &[], &[]);
    assert_eq!(r.code, 1, "{}", r.stderr);
}

#[test]
fn csv_requires_grid_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &rf_config(""));
    let r = run("kinetic", &cfg, &dir.path().join("o.csv"), &[], &[]);
    assert_eq!(r.code, 1);
}

#[test]
fn correlate_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &rf_config(r#""separations": [0.0, 1.0, 2.5]"#));
    let out = dir.path().join("o.csv");
    let r = run("correlate", &cfg, &out, &[], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let text = String::from_utf8(r.output.unwrap()).unwrap();
    let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data[0], "d,re,im");
    assert_eq!(data.len(), 4);
    let first: Vec<f64> = data[1].split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(first[0], 0.0);
    assert!((first[1] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn json_output_round_trips_as_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &rf_config(r#""separations": [0.5, 2.0]"#));
    let first = dir.path().join("first.json");
    let r1 = run("correlate", &cfg, &first, &[], &[]);
    assert_eq!(r1.code, 0, "{}", r1.stderr);
    let second = dir.path().join("second.json");
    let r2 = run("correlate", &first, &second, &[], &[]);
    assert_eq!(r2.code, 0, "{}", r2.stderr);
    assert_eq!(r1.output, r2.output);
}

#[test]
fn csv_output_round_trips_as_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &rf_config(r#""n_traj": 20, "seed": 18446744073709551615, "bins": [0.0125, 0.5125]"#),
    );
    let first = dir.path().join("first.csv");
    let r1 = run("trajectories", &cfg, &first, &[], &[]);
    assert_eq!(r1.code, 0, "{}", r1.stderr);
    let second = dir.path().join("second.csv");
    let r2 = run("trajectories", &first, &second, &[], &[]);
    assert_eq!(r2.code, 0, "{}", r2.stderr);
    assert_eq!(r1.output, r2.output);
}

#[test]
fn trajectories_are_byte_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &rf_config(r#""n_traj": 64, "seed": 12345, "bins": [0.0125, 0.5125, 1.0125]"#),
    );
    let a = run("trajectories", &cfg, &dir.path().join("a.json"), &["--threads", "1"], &[]);
    let b = run("trajectories", &cfg, &dir.path().join("b.json"), &["--threads", "4"], &[]);
    let c = run("trajectories", &cfg, &dir.path().join("c.json"), &[], &[("CMPS_LAB_THREADS", "3")]);
    let d = run("trajectories", &cfg, &dir.path().join("d.json"), &["--threads", "0"], &[]);
    for r in [&a, &b, &c, &d] {
        assert_eq!(r.code, 0, "{}", r.stderr);
    }
    assert_eq!(a.output, b.output);
    assert_eq!(a.output, c.output);
    assert_eq!(a.output, d.output);
}

#[test]
fn different_seeds_differ() {
    let dir = tempfile::tempdir().unwrap();
    let c1 = write_config(dir.path(), "c1.json", &rf_config(r#""n_traj": 16, "seed": 1, "bins": [0.0125, 0.5125]"#));
    let c2 = write_config(dir.path(), "c2.json", &rf_config(r#""n_traj": 16, "seed": 2, "bins": [0.0125, 0.5125]"#));
    let a = run("trajectories", &c1, &dir.path().join("a.csv"), &[], &[]);
    let b = run("trajectories", &c2, &dir.path().join("b.csv"), &[], &[]);
    assert_eq!(a.code, 0);
    assert_eq!(b.code, 0);
    assert_ne!(a.output, b.output);
}

#[test]
fn bad_thread_env_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &rf_config(""));
    let r = run("steady", &cfg, &dir.path().join("o.json"), &[], &[("CMPS_LAB_THREADS", "many")]);
    assert_eq!(r.code, 1);
}

#[test]
fn missing_config_file_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = run("steady", &dir.path().join("nope.json"), &dir.path().join("o.json"), &[], &[]);
    assert_eq!(r.code, 1);
}

#[test]
fn every_command_runs_on_rf() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("steady", ""),
        ("gap", r#""window": {"d_min": 2, "d_max": 10, "n_points": 20}"#),
        ("correlate", r#""separations": [1.0], "connected": true"#),
        ("g2", r#""separations": [0.0, 1.0]"#),
        ("kinetic", ""),
        ("ll-energy", r#""coupling": 2.0, "chemical_potential": 0.1"#),
        ("discretize", r#""epsilons": [0.02, 0.01], "separations": [1.0]"#),
        ("converge", r#""epsilons": [0.02, 0.01, 0.005], "observable": "two_point", "distance": 1.0"#),
        ("trajectories", r#""n_traj": 8, "seed": 3, "bins": [0.0125, 0.5125]"#),
        (
            "lindblad-check",
            r#""moments": {"psi_dag_sq": {"re": 0, "im": 0}, "psi_sq": {"re": 0, "im": 0}, "psi_dag_psi": 0.5, "psi_psi_dag": 1.5}"#,
        ),
        ("zfunctional-check", r#""epsilons": [0.02], "steps": [0.2]"#),
        (
            "family-deriv",
            r#""perturbation": {"dK": {"re": [[1, 0], [0, -1]]}, "dR": {"re": [[0, 0.3], [0, 0]]}}, "insertions": [{"position": 0, "kind": "create"}, {"position": 1, "kind": "annihilate"}]"#,
        ),
    ];
    for (command, extra) in cases {
        let cfg = write_config(dir.path(), &format!("{command}.cfg.json"), &rf_config(extra));
        let out = dir.path().join(format!("{command}.json"));
        let r = run(command, &cfg, &out, &[], &[]);
        assert_eq!(r.code, 0, "{command}: {}", r.stderr);
        let doc: Value = serde_json::from_slice(&r.output.unwrap()).unwrap();
        assert_eq!(doc["command"], command);
    }
}

#[test]
fn converge_rejects_unknown_observable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &rf_config(r#""epsilons": [0.01], "observable": "current""#));
    let r = run("converge", &cfg, &dir.path().join("o.json"), &[], &[]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("current"));
}
