//! CLI integration tests: exit-code contract, file outputs, determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_apse"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../apse/data")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_accepts_shipped_feeder() {
    let out = run(&[
        "validate",
        "--network",
        data("feeder33.json").to_str().unwrap(),
        "--measurements",
        data("meters33.json").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("69 rows vs 64 states"), "stdout: {text}");
    assert!(text.contains("observability"), "stdout: {text}");
}

#[test]
fn validate_reports_unknown_bus_with_usage_exit() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("meters.json");
    std::fs::write(
        &bad,
        r#"{"mag_buses": [2, 99], "flow_lines": [0], "inj_buses": [2],
            "sigmas": {"mag": 0.004, "flow": 0.01, "inj": 0.02}}"#,
    )
    .unwrap();
    let out = run(&[
        "validate",
        "--network",
        data("feeder33.json").to_str().unwrap(),
        "--measurements",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("99"), "stderr: {}", stderr(&out));
}

#[test]
fn validate_flags_redundancy_failure() {
    let dir = tempfile::tempdir().unwrap();
    let thin = dir.path().join("meters.json");
    // 3 + 2 + 10 = 15 rows << 64 states
    std::fs::write(
        &thin,
        r#"{"mag_buses": [2, 6, 18], "flow_lines": [0],
            "inj_buses": [2, 3, 4, 5, 6],
            "sigmas": {"mag": 0.004, "flow": 0.01, "inj": 0.02}}"#,
    )
    .unwrap();
    let out = run(&[
        "validate",
        "--network",
        data("feeder33.json").to_str().unwrap(),
        "--measurements",
        thin.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("redundancy"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn estimate_recovers_independent_nominal_solution() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "estimate",
        "--network",
        data("feeder33.json").to_str().unwrap(),
        "--measurements",
        data("meters33.json").to_str().unwrap(),
        "--profiles",
        data("profile33_nominal.csv").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let state = std::fs::read_to_string(dir.path().join("state.csv")).unwrap();
    let v18: f64 = state
        .lines()
        .find(|l| l.starts_with("18,"))
        .and_then(|l| l.split(',').nth(1))
        .and_then(|s| s.parse().ok())
        .expect("bus 18 present");
    // value computed by an independent power-flow implementation
    assert!(
        (v18 - 0.9130904793611765).abs() <= 1e-8,
        "V18 = {v18} off the reference"
    );

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("estimate.json")).unwrap())
            .unwrap();
    assert_eq!(summary["converged"], true);
    assert!(summary["iterations"].as_u64().unwrap() >= 1);
    assert!(summary["final_step_norm"].as_f64().unwrap() < 1e-6);
}

#[test]
fn estimate_is_deterministic_and_supports_squared_form() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for (dir, extra) in [(&dir_a, false), (&dir_b, false)] {
        let mut args = vec![
            "estimate".to_string(),
            "--network".into(),
            data("feeder33.json").to_str().unwrap().into(),
            "--measurements".into(),
            data("meters33.json").to_str().unwrap().into(),
            "--profiles".into(),
            data("profile33_nominal.csv").to_str().unwrap().into(),
            "--out".into(),
            dir.path().to_str().unwrap().into(),
        ];
        if extra {
            args.push("--squared-magnitudes".into());
        }
        let out = bin().args(&args).output().unwrap();
        assert!(out.status.success());
    }
    let a = std::fs::read(dir_a.path().join("state.csv")).unwrap();
    let b = std::fs::read(dir_b.path().join("state.csv")).unwrap();
    assert_eq!(a, b, "same input must give identical output files");

    // squared-magnitude form lands on the same state within 1e-8
    let dir_c = tempfile::tempdir().unwrap();
    let out = run(&[
        "estimate",
        "--network",
        data("feeder33.json").to_str().unwrap(),
        "--measurements",
        data("meters33.json").to_str().unwrap(),
        "--profiles",
        data("profile33_nominal.csv").to_str().unwrap(),
        "--out",
        dir_c.path().to_str().unwrap(),
        "--squared-magnitudes",
    ]);
    assert!(out.status.success());
    let plain = std::fs::read_to_string(dir_a.path().join("state.csv")).unwrap();
    let squared = std::fs::read_to_string(dir_c.path().join("state.csv")).unwrap();
    for (lp, ls) in plain.lines().skip(1).zip(squared.lines().skip(1)) {
        let vp: f64 = lp.split(',').nth(1).unwrap().parse().unwrap();
        let vs: f64 = ls.split(',').nth(1).unwrap().parse().unwrap();
        assert!((vp - vs).abs() <= 1e-8);
    }
}

#[test]
fn estimate_nonconvergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // poison the nominal profile: injections far beyond feasibility
    let text = std::fs::read_to_string(data("profile33_nominal.csv")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let row: Vec<String> = lines
        .next()
        .unwrap()
        .split(',')
        .enumerate()
        .map(|(i, v)| {
            if i >= 6 {
                let x: f64 = v.parse().unwrap();
                format!("{}", x * 1.0e4)
            } else {
                v.to_string()
            }
        })
        .collect();
    let poisoned = dir.path().join("poisoned.csv");
    std::fs::write(&poisoned, format!("{header}\n{}\n", row.join(","))).unwrap();

    let out = run(&[
        "estimate",
        "--network",
        data("feeder33.json").to_str().unwrap(),
        "--measurements",
        data("meters33.json").to_str().unwrap(),
        "--profiles",
        poisoned.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

#[test]
fn batch_writes_summary_and_is_deterministic() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let out = run(&[
            "batch",
            "--experiment",
            data("experiment33.json").to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "--samples",
            "40",
            "--threads",
            "1",
        ]);
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        assert!(stdout(&out).contains("summary.json"));
    }
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir_a.path().join("summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["sample_count"], 39);
    assert!(summary["speedup_ratio"].as_f64().is_some());
    assert!(summary["ks_voltage"].as_object().map(|m| !m.is_empty()).unwrap_or(false));

    for name in [
        "profiles.csv",
        "states/estimates_apse.csv",
        "states/estimates_gnvqr.csv",
        "basis.csv",
    ] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} not deterministic");
    }
}

#[test]
fn batch_single_sample_pair_is_degenerate_but_valid() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "batch",
        "--experiment",
        data("experiment33.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--samples",
        "2",
        "--compare",
        "gnvqr",
        "--threads",
        "1",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["sample_count"], 1);
    assert_eq!(summary["speedup_ratio"], serde_json::Value::Null);
}

#[test]
fn usage_errors_exit_one() {
    let out = run(&["estimate", "--network", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_file_is_io_error() {
    let out = run(&[
        "validate",
        "--network",
        "/nonexistent/net.json",
        "--measurements",
        data("meters33.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
}
