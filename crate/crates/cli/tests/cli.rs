//! Binary-level tests: subcommand wiring, exit codes, config precedence.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn linkaudit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_linkaudit"))
        .args(args)
        .env_remove("LINKAUDIT_CONFIG")
        .output()
        .expect("binary runs")
}

fn write_scenario(dir: &Path) -> PathBuf {
    let path = dir.join("scenario.json");
    let scenario = serde_json::json!({
        "seed": 5,
        "duration_s": 7200.0,
        "schedule": [
            {"start": 1731000000.0, "state": "S2"},
            {"start": 1731003900.0, "state": "S3"}
        ],
        "quota_depletion": {"t_quota_zero": 1731003600.0, "g_duration_s": 300.0}
    });
    std::fs::write(&path, serde_json::to_string_pretty(&scenario).unwrap()).unwrap();
    path
}

fn simulate_logs(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let scenario = write_scenario(dir);
    let logs = dir.join("logs");
    let out = linkaudit(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        logs.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (
        logs.join("telemetry.jsonl"),
        logs.join("probes.jsonl"),
        logs.join("portal.jsonl"),
    )
}

#[test]
fn report_pipeline_succeeds_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (telemetry, probes, portal) = simulate_logs(dir.path());
    let out_dir = dir.path().join("report");
    let out = linkaudit(&[
        "report",
        "--telemetry",
        telemetry.to_str().unwrap(),
        "--probes",
        probes.to_str().unwrap(),
        "--portal",
        portal.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0 high/low confusions"), "{stdout}");
    for file in [
        "manifest.json",
        "summary.csv",
        "detections.csv",
        "features.csv",
        "confusion.csv",
        "scatter.csv",
        "cdf_down.csv",
        "cdf_rtt.csv",
        "grace.json",
        "segments.jsonl",
    ] {
        assert!(out_dir.join(file).exists(), "missing {file}");
    }
}

#[test]
fn grace_subcommand_measures_the_injected_window() {
    let dir = tempfile::tempdir().unwrap();
    let (_, probes, portal) = simulate_logs(dir.path());
    let out_dir = dir.path().join("grace");
    let out = linkaudit(&[
        "grace",
        "--probes",
        probes.to_str().unwrap(),
        "--portal",
        portal.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let grace: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("grace.json")).unwrap())
            .unwrap();
    let g = grace["g_duration_s"].as_f64().unwrap();
    assert!((g - 300.0).abs() <= 120.0, "G = {g}");
}

#[test]
fn majority_malformed_file_exits_with_format_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("telemetry.jsonl");
    // 3 of 5 lines malformed.
    let good = r#"{"ts":1,"downlink_throughput_bps":1,"uplink_throughput_bps":1,"pop_rtt_ms":1,"pop_loss_fraction":0,"obstructed":false}"#;
    let content = format!("junk\n{good}\nmore junk\n{good}\nworse junk\n");
    std::fs::write(&path, content).unwrap();
    let out = linkaudit(&["validate", "--telemetry", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("suspected wrong file"));
}

#[test]
fn overlapping_clusters_exit_with_no_separation_code() {
    let dir = tempfile::tempdir().unwrap();
    // Hand-built logs where S1 and S2 performance is identical.
    let t0 = 1_731_000_000.0_f64;
    let mut telemetry = String::new();
    for k in 0..7200 {
        telemetry.push_str(&format!(
            "{{\"ts\":{},\"downlink_throughput_bps\":1.07e9,\"uplink_throughput_bps\":0,\"pop_rtt_ms\":22,\"pop_loss_fraction\":0,\"obstructed\":false}}\n",
            t0 + k as f64
        ));
    }
    let mut probes = String::new();
    for k in 0..60 {
        probes.push_str(&format!(
            "{{\"kind\":\"speedtest\",\"ts\":{},\"down_mbps\":100.0,\"up_mbps\":10.0}}\n",
            t0 + k as f64 * 120.0
        ));
    }
    let portal = format!(
        "{{\"ts\":{t0},\"state\":\"S1\"}}\n{{\"ts\":{},\"state\":\"S2\"}}\n",
        t0 + 3600.0
    );
    let telemetry_path = dir.path().join("telemetry.jsonl");
    let probes_path = dir.path().join("probes.jsonl");
    let portal_path = dir.path().join("portal.jsonl");
    std::fs::write(&telemetry_path, telemetry).unwrap();
    std::fs::write(&probes_path, probes).unwrap();
    std::fs::write(&portal_path, portal).unwrap();

    let out = linkaudit(&[
        "calibrate",
        "--telemetry",
        telemetry_path.to_str().unwrap(),
        "--probes",
        probes_path.to_str().unwrap(),
        "--portal",
        portal_path.to_str().unwrap(),
        "--out",
        dir.path().join("cal").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no separation"));
}

#[test]
fn missing_required_flag_exits_with_usage_code() {
    let out = linkaudit(&["label"]);
    assert_eq!(out.status.code(), Some(1));
    let out = linkaudit(&["--bogus-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let (telemetry, probes, _) = simulate_logs(dir.path());
    let config_path = dir.path().join("config.json");
    std::fs::write(
        &config_path,
        serde_json::json!({"feature": {"window_s": 360.0, "align_tol_s": 10.0, "min_tests_per_window": 1}})
            .to_string(),
    )
    .unwrap();

    let rows = |out_dir: &Path| -> usize {
        std::fs::read_to_string(out_dir.join("features.csv"))
            .unwrap()
            .lines()
            .count()
            - 1
    };

    // Config file alone: W = 360 halves the window count.
    let out_config = dir.path().join("w_config");
    let out = linkaudit(&[
        "features",
        "--config",
        config_path.to_str().unwrap(),
        "--telemetry",
        telemetry.to_str().unwrap(),
        "--probes",
        probes.to_str().unwrap(),
        "--out",
        out_config.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(rows(&out_config), 20);

    // Flag beats config file.
    let out_flag = dir.path().join("w_flag");
    let out = linkaudit(&[
        "features",
        "--config",
        config_path.to_str().unwrap(),
        "--window-s",
        "180",
        "--telemetry",
        telemetry.to_str().unwrap(),
        "--probes",
        probes.to_str().unwrap(),
        "--out",
        out_flag.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(rows(&out_flag), 40);

    // Environment variable supplies the config path.
    let out_env = dir.path().join("w_env");
    let output = Command::new(env!("CARGO_BIN_EXE_linkaudit"))
        .env("LINKAUDIT_CONFIG", config_path.to_str().unwrap())
        .args([
            "features",
            "--telemetry",
            telemetry.to_str().unwrap(),
            "--probes",
            probes.to_str().unwrap(),
            "--out",
            out_env.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    assert_eq!(rows(&out_env), 20);
}

#[test]
fn detect_without_portal_classifies_windows() {
    let dir = tempfile::tempdir().unwrap();
    let (telemetry, probes, _) = simulate_logs(dir.path());
    let out_dir = dir.path().join("detect");
    let out = linkaudit(&[
        "detect",
        "--telemetry",
        telemetry.to_str().unwrap(),
        "--probes",
        probes.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let detections = std::fs::read_to_string(out_dir.join("detections.csv")).unwrap();
    assert!(detections.lines().count() > 30);
    assert!(detections.contains("HighSpeed"));
    assert!(detections.contains("LowRateS3"));
}
