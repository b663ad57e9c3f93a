use std::path::Path;
use std::process::{Command, Output};

use drlq::experiments::{read_csv, ConvergenceRow, GapRow, RunMetadata, RunSummary, RuntimeRow, StationaryRow};
use drlq::frank_wolfe::FwRecord;
use drlq::output::csv_bytes;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn drlq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drlq")).args(args).output().expect("binary runs")
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

/// Reads a CSV and checks that writing the rows back reproduces the file.
fn round_trip<T: DeserializeOwned + Serialize>(path: &Path) -> Vec<T> {
    let rows: Vec<T> = read_csv(path).unwrap();
    assert_eq!(csv_bytes(&rows).unwrap(), std::fs::read(path).unwrap(), "{}", path.display());
    rows
}

fn summary(bytes: &[u8]) -> RunSummary {
    serde_json::from_slice(bytes).expect("summary is JSON")
}

#[test]
fn solve_writes_trace_solution_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = drlq(&["solve", "--seed", "3", "--rho", "0.2", "--horizon", "3", "--dim", "2", "--divergence", "fisher", "--out", out]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(summary(&res.stdout).all_converged);
    assert_eq!(header(&dir.path().join("trace.csv")), "iter,objective,fw_gap,step,wall_ms");
    let trace: Vec<FwRecord> = round_trip(&dir.path().join("trace.csv"));
    assert!(!trace.is_empty());
    let solution: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("solution.json")).unwrap()).unwrap();
    assert!(solution.is_object());
    let meta: RunMetadata = serde_json::from_slice(&std::fs::read(dir.path().join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta.seeds, vec![3]);
    assert_eq!(meta.config_sha256.len(), 64);
    assert!(meta.rng.contains("chacha20"));
}

#[test]
fn solve_requires_its_flags() {
    let res = drlq(&["solve", "--seed", "3", "--rho", "0.2"]);
    assert_ne!(res.status.code(), Some(0));
}

#[test]
fn gaps_csv_is_schema_stable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = drlq(&["gaps", "--out", out, "--seed", "0,1", "--rho", "0,0.5,1", "--jobs", "2"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let path = dir.path().join("gaps.csv");
    assert_eq!(header(&path), "rho,seed,worst_case_gap,nominal_gap");
    let rows: Vec<GapRow> = round_trip(&path);
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().filter(|r| r.rho == 0.0).all(|r| r.worst_case_gap == 0.0));
}

#[test]
fn runtime_and_stationary_outputs_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = drlq(&["runtime", "--out", out, "--seed", "0", "--dim", "2", "--horizons", "2,3"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(header(&dir.path().join("runtime.csv")), "T,seed,wall_seconds,iterations");
    let rows: Vec<RuntimeRow> = round_trip(&dir.path().join("runtime.csv"));
    assert_eq!(rows.len(), 2);

    let res = drlq(&["stationary", "--out", out, "--seed", "0", "--rho", "0,0.5", "--divergence", "kl"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(
        header(&dir.path().join("stationary.csv")),
        "rho,seed,nominal_cost,robust_cost,iterations,converged,min_dominance"
    );
    let rows: Vec<StationaryRow> = round_trip(&dir.path().join("stationary.csv"));
    assert_eq!(rows.len(), 2);
    assert!(rows[1].robust_cost >= rows[1].nominal_cost);
}

#[test]
fn unconverged_runs_exit_with_one_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = drlq(&["convergence", "--out", out, "--seed", "0", "--dim", "3", "--horizon", "3", "--max-iters", "1", "--gap-tol", "1e-12"]);
    assert_eq!(res.status.code(), Some(1));
    let s = summary(&res.stderr);
    assert!(!s.all_converged);
    assert_eq!(s.failures.len(), 1);
    let rows: Vec<ConvergenceRow> = round_trip(&dir.path().join("convergence_summary.csv"));
    assert!(!rows[0].converged);
    assert_eq!(header(&dir.path().join("trace_T3_seed0.csv")), "iter,objective,fw_gap,step,wall_ms");
}

#[test]
fn bad_input_exits_with_two_and_an_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = drlq(&["gaps", "--out", out, "--divergence", "hellinger"]);
    assert_eq!(res.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(err["status"], "error");

    let config = dir.path().join("config_v2.json");
    std::fs::write(&config, r#"{"schema": 2}"#).unwrap();
    let res = drlq(&["gaps", "--config", config.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    let body = serde_json::json!({
        "schema": 1,
        "experiment": "gaps",
        "d": 2,
        "T": 2,
        "divergence": "kl",
        "rho": [0.0, 1.0],
        "seeds": [4, 5, 6],
        "output_dir": dir.path().join("ignored"),
    });
    std::fs::write(&config, body.to_string()).unwrap();
    let out = dir.path().join("out");
    let res = drlq(&["gaps", "--config", config.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let rows: Vec<GapRow> = read_csv(&out.join("gaps.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.seed == 7));
    assert!(!dir.path().join("ignored").exists());
}
