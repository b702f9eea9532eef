mod common;

use std::path::Path;
use std::process::Command;

use sap_core::mock::MockBehavior;
use serde_json::Value;

fn sap(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_sap")).args(args).env_remove("RUST_LOG").output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_with_mock_endpoint_writes_valid_history() {
    let dir = tempfile::tempdir().unwrap();
    let (task, manifest) = common::fixtures(dir.path());
    let out = dir.path().join("history.json");
    let (code, _, err) = sap(&["run", "--task", s(&task), "--manifest", s(&manifest), "--endpoint", "mock://", "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    let doc: Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(common::schema_errors(&doc), Vec::<String>::new());
    assert_eq!(doc["generations"].as_array().unwrap().len(), 2);
    assert_eq!(doc["cost"]["model_calls"], 8);
    assert_eq!(doc["final_answer"]["provenance"], "elite");
}

#[test]
fn run_over_http_endpoint() {
    let server = common::spawn_blocking(MockBehavior::Normal);
    let dir = tempfile::tempdir().unwrap();
    let (task, manifest) = common::fixtures(dir.path());
    let url = server.url();
    let (code, stdout, err) = sap(&[
        "run", "--task", s(&task), "--manifest", s(&manifest), "--endpoint", &url, "--decision", "aggregate",
        "--max-concurrency", "2",
    ]);
    assert_eq!(code, 0, "{err}");
    let doc: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(doc["final_answer"]["provenance"], "aggregated");
    assert_eq!(server.model.calls(), 9);
    assert!(common::schema_errors(&doc).is_empty());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (task, manifest) = common::fixtures(dir.path());
    let missing = dir.path().join("nope.json");

    let (code, _, _) = sap(&["run", "--task", s(&task), "--manifest", s(&missing), "--endpoint", "mock://"]);
    assert_eq!(code, 3);
    let (code, _, _) = sap(&["run", "--task", s(&task), "--manifest", s(&manifest)]);
    assert_eq!(code, 3);
    let (code, _, err) = sap(&["run", "--task", s(&task), "--manifest", s(&manifest), "--endpoint", "mock://", "--lambda", "0"]);
    assert_eq!(code, 3);
    assert!(err.contains("lambda"), "{err}");
    let (code, _, _) = sap(&["run", "--task", s(&task), "--manifest", s(&manifest), "--endpoint", "mock://fail-all"]);
    assert_eq!(code, 2);
    let (code, _, _) = sap(&["frobnicate"]);
    assert_eq!(code, 3);
    let (code, _, _) = sap(&["--help"]);
    assert_eq!(code, 0);

    let blocked = dir.path().join("missing-dir").join("h.json");
    let (code, _, _) = sap(&["run", "--task", s(&task), "--manifest", s(&manifest), "--endpoint", "mock://", "--out", s(&blocked)]);
    assert_eq!(code, 4);
}

#[test]
fn failing_routes_still_produce_a_fallback_answer() {
    let dir = tempfile::tempdir().unwrap();
    let (task, manifest) = common::fixtures(dir.path());
    let (code, stdout, err) = sap(&["run", "--task", s(&task), "--manifest", s(&manifest), "--endpoint", "mock://fail-routes"]);
    assert_eq!(code, 0, "{err}");
    let doc: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(doc["final_answer"]["provenance"], "fallback");
    assert_eq!(doc["final_answer"]["uncertainty"], "high");
    assert!(common::schema_errors(&doc).is_empty());
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let (task, manifest) = common::fixtures(dir.path());
    let cfg = dir.path().join("sap.toml");
    std::fs::write(&cfg, "mu = 3\nlambda = 1\nT = 1\n[[endpoints]]\nurl = \"mock://\"\nmax_concurrency = 2\n").unwrap();
    let (code, stdout, err) = sap(&["run", "--task", s(&task), "--manifest", s(&manifest), "--config", s(&cfg), "--mu", "1"]);
    assert_eq!(code, 0, "{err}");
    let doc: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!((doc["config"]["mu"].as_u64(), doc["config"]["lambda"].as_u64()), (Some(1), Some(1)));
    assert_eq!(doc["generations"].as_array().unwrap().len(), 1);

    std::fs::write(&cfg, "mu = 0\n").unwrap();
    let (code, _, err) = sap(&["run", "--task", s(&task), "--manifest", s(&manifest), "--config", s(&cfg), "--endpoint", "mock://"]);
    assert_eq!(code, 3);
    assert!(err.contains("mu"), "{err}");
}

#[test]
fn validate_manifest_command() {
    let dir = tempfile::tempdir().unwrap();
    let (_, manifest) = common::fixtures(dir.path());
    let (code, stdout, _) = sap(&["validate-manifest", s(&manifest)]);
    assert_eq!(code, 0);
    let doc: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!((doc["valid"].as_bool(), doc["objects"].as_u64()), (Some(true), Some(2)));
    assert!(doc["warnings"].as_array().unwrap().is_empty());

    let (code, stdout, _) = sap(&["validate-manifest", s(&manifest), "--max-objects", "1"]);
    assert_eq!(code, 0);
    let doc: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(doc["objects"], 1);
    assert_eq!(doc["warnings"].as_array().unwrap().len(), 1);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"images":[],"objects":[{"image_index":1,"object_index":1,"label":"x"}]}"#).unwrap();
    let (code, stdout, _) = sap(&["validate-manifest", s(&bad)]);
    assert_eq!(code, 3);
    assert!(stdout.contains("\"valid\": false"));
}

#[test]
fn simulate_commands() {
    let (code, stdout, _) = sap(&["simulate", "--experiment", "improvement", "--q", "0.2", "--lambda", "4", "--trials", "20000"]);
    assert_eq!(code, 0);
    let doc: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(doc["simulation"]["report"]["theoretical_bound"], "369/625");
    let (code, _, _) = sap(&["simulate", "--experiment", "monotone", "--trials", "1000"]);
    assert_eq!(code, 0);
    let (code, stdout, _) = sap(&["simulate", "--experiment", "coverage", "--q", "0.05", "--lambda", "2", "--T", "10", "--trials", "2000"]);
    assert_eq!(code, 0);
    let doc: Value = serde_json::from_str(&stdout).unwrap();
    let b = doc["simulation"]["report"]["bound_value"].as_f64().unwrap();
    assert!((b - 0.6415).abs() < 1e-4);
    let (code, _, _) = sap(&["simulate", "--experiment", "linearization", "--q", "0.5"]);
    assert_eq!(code, 3);
}

#[test]
fn cost_report_from_history() {
    let dir = tempfile::tempdir().unwrap();
    let (task, manifest) = common::fixtures(dir.path());
    let out = dir.path().join("h.json");
    let (code, _, _) = sap(&["run", "--task", s(&task), "--manifest", s(&manifest), "--endpoint", "mock://", "--out", s(&out)]);
    assert_eq!(code, 0);
    let (code, stdout, _) = sap(&["cost-report", "--history", s(&out)]);
    assert_eq!(code, 0);
    let doc: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(doc["ratio"], "1/8");
    let h: Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(doc["mean_route_length"], h["cost"]["mean_route_length"]);
}
