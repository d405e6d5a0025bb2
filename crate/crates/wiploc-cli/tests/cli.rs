//! End-to-end checks of the binary: exit codes, files written, stdout shape.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wiploc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wiploc")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn run_writes_the_three_output_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = wiploc(&["run", "rl-1anchor", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    for file in ["trace.csv", "report.txt", "energy.csv"] {
        let path = out_dir.join(file);
        assert!(path.is_file(), "{file} missing");
        assert!(fs::metadata(&path).unwrap().len() > 0, "{file} empty");
    }
    let text = stdout(&out);
    assert!(text.contains("prr"), "report missing from stdout: {text}");
    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("position,time_ms,node,event,detail"));
}

#[test]
fn same_seed_reproduces_the_trace_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let out =
            wiploc(&["run", "cl-corridor", "--seed", "77", "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "stderr: {}", stderr(&out));
    }
    let first = fs::read(a.join("trace.csv")).unwrap();
    let second = fs::read(b.join("trace.csv")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn scenario_files_next_to_the_binary_work_too() {
    // A plain path (not a bundled name) must load as well.
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../experiments/dz.toml");
    let dir = tempfile::tempdir().unwrap();
    let out = wiploc(&[
        "run",
        path.to_str().unwrap(),
        "--rounds",
        "2",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
}

#[test]
fn malformed_scenario_names_the_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "name = \"bad\"\nseed = 1\nwibble = 3\n").unwrap();
    let out = wiploc(&["run", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("wibble"), "stderr must name the key: {}", stderr(&out));
}

#[test]
fn unknown_scenario_name_lists_the_bundled_ones() {
    let out = wiploc(&["run", "no-such-scenario"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("rl-1anchor") && err.contains("cl-corridor"), "stderr: {err}");
}

#[test]
fn codec_round_trips_through_hex() {
    let zero = wiploc(&["codec", "encode", "0"]);
    assert!(zero.status.success());
    assert_eq!(stdout(&zero).trim(), "f".repeat(60));

    let five = wiploc(&["codec", "encode", "5"]);
    assert!(five.status.success());
    let hex = stdout(&five).trim().to_string();
    assert_eq!(hex.len(), 60);

    let decoded = wiploc(&["codec", "decode", &hex]);
    assert!(decoded.status.success());
    assert_eq!(stdout(&decoded).trim(), "5 0");
}

#[test]
fn codec_decode_of_noise_prints_nothing() {
    // Eight ones per sixteen-chip block despreads to the all-zero word,
    // which no identifier's codeword comes close to.
    let noise = "00ff".repeat(15);
    let out = wiploc(&["codec", "decode", &noise]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "");
}

#[test]
fn codec_rejects_malformed_hex() {
    let odd = wiploc(&["codec", "decode", "abc"]);
    assert!(!odd.status.success());
    assert!(stderr(&odd).contains("even number"), "stderr: {}", stderr(&odd));

    let short = wiploc(&["codec", "decode", "ffff"]);
    assert!(!short.status.success());
    assert!(stderr(&short).contains("240"), "stderr: {}", stderr(&short));
}

#[test]
fn sweep_prints_one_line_per_value_and_writes_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep");
    let out = wiploc(&[
        "sweep",
        "cl-room",
        "--param",
        "sample-period",
        "--values",
        "5,10",
        "--parallel",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("value        5") && text.contains("value       10"), "stdout: {text}");
    assert!(text.contains("duty_power"), "sample-period sweeps report the duty-cycle power");
    let summary = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(out_dir.join("sample-period-5/trace.csv").is_file());
}

#[test]
fn energy_rejects_a_zero_length_round() {
    let out = wiploc(&["energy", "--t-m", "0"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("measure_interval_ms"), "stderr: {}", stderr(&out));
}

#[test]
fn energy_prints_the_optimum_and_a_feasible_table() {
    let out = wiploc(&["energy", "--max", "10"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("8.8187"), "closed form missing: {text}");
    assert!(text.contains("<- minimum"), "grid minimum unmarked: {text}");
    assert!(text.contains("infeasible"), "sub-conversion rows must be marked: {text}");
}
