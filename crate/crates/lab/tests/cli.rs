use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gstop(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gstop"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("GSTOP_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

const RUNNING: [&str; 6] = ["--set", "tree.steps=2", "--set", "tree.horizon=2", "--set", "reward=abs(w)"];

#[test]
fn every_command_succeeds_on_the_running_example() {
    for cmd in ["expectation", "stop", "oracle", "verify", "ladder"] {
        let dir = tempfile::tempdir().unwrap();
        let out = gstop(dir.path(), &[&[cmd][..], &RUNNING].concat());
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        let r = report(dir.path());
        assert_eq!(r["schema_version"], 1);
        assert_eq!(r["command"], cmd);
    }
}

#[test]
fn oracle_agrees_with_dynamic_programming_on_the_running_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = gstop(dir.path(), &[&["oracle"][..], &RUNNING].concat());
    assert!(out.status.success());
    let r = report(dir.path());
    let o = &r["results"]["oracle"];
    let dp = o["dp_value"].as_f64().unwrap();
    let bf = o["brute_force_value"].as_f64().unwrap();
    assert!((dp - 1.0).abs() < 1e-12, "{r}");
    assert!((bf - dp).abs() < 1e-9);
    assert_eq!(o["rules"], 5);
    let (header, rows) = csv_rows(&dir.path().join("lambda.csv"));
    assert_eq!(header, ["lambda", "value", "v0"]);
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert!((row[1].parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn verify_passes_for_the_classical_case() {
    let dir = tempfile::tempdir().unwrap();
    let out = gstop(dir.path(), &["verify", "--set", "tree.steps=4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(report(dir.path())["results"]["verify"]["passed"], true);
}

#[test]
fn constraint_violating_a3_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gstop(dir.path(), &["expectation", "--set", "constraint=abs(z)+1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("phi(t, y, 0) = 0"));
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gstop(dir.path(), &["nonsense"]).status.code(), Some(1));
    assert_eq!(gstop(dir.path(), &["expectation", "--set", "tree.bogus=1"]).status.code(), Some(1));
    assert_eq!(gstop(dir.path(), &["expectation", "--set", "generator=y+"]).status.code(), Some(1));
    assert_eq!(gstop(dir.path(), &["oracle", "--set", "tree.steps=6"]).status.code(), Some(1));
}

#[test]
fn stability_violation_is_a_solver_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gstop(dir.path(), &["expectation", "--set", "generator=10*y", "--set", "tree.steps=2"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn empty_lambda_list_writes_header_only_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = gstop(dir.path(), &[&["stop", "--set", "lambdas=[]"][..], &RUNNING].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = csv_rows(&dir.path().join("lambda.csv"));
    assert_eq!(header, ["lambda", "value", "v0"]);
    assert!(rows.is_empty());
}

#[test]
fn zero_constraint_gives_flat_penalty_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = gstop(dir.path(), &["expectation", "--set", "method.kind=penalized", "--set", "generator=0.5*abs(z)"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = csv_rows(&dir.path().join("penalty.csv"));
    assert_eq!(header, ["n", "root", "max_violation"]);
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r[1] == rows[0][1]));
}

#[test]
fn stdout_mode_writes_nothing_to_disk() {
    let dir = tempfile::tempdir().unwrap();
    let out = gstop(dir.path(), &["expectation", "--stdout"]);
    assert!(out.status.success());
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((r["results"]["expectation"]["penalized_root"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn out_dir_defaults_to_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gstop"))
        .arg("expectation")
        .env("GSTOP_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("report.json").exists());
    assert!(dir.path().join("nodes.csv").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["verify", "--set", "generator=0.5*abs(z)", "--set", "constraint=neg(z)", "--set", "seed=7"];
    assert!(gstop(a.path(), &args).status.success());
    assert!(gstop(b.path(), &args).status.success());
    assert_eq!(fs::read(a.path().join("report.json")).unwrap(), fs::read(b.path().join("report.json")).unwrap());
}

#[test]
fn numeric_looking_expressions_stay_strings() {
    let dir = tempfile::tempdir().unwrap();
    let out = gstop(dir.path(), &["expectation", "--set", "generator=0", "--set", "constraint=0", "--set", "terminal.expr=1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(report(dir.path())["config"]["generator"], "0");
}
