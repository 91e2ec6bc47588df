use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn cgr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgr")).args(args).output().expect("spawn cgr")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write(dir: &TempDir, name: &str, v: &Value) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, v.to_string()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `N(x) = θ − x` on `[0, 1]` with the property `N(x) ≥ 0`.
fn halfline(dir: &TempDir, theta: f64) -> (PathBuf, PathBuf) {
    let model = json!({
        "kind": "affine",
        "layers": [{"weights": [[-1.0]], "bias": [theta], "activation": "none"}]
    });
    let spec = json!({"properties": [{
        "name": "nonneg",
        "input": {"box": {"lo": [0.0], "hi": [1.0]}},
        "sat": {"type": "affine", "terms": [{"a": [1.0], "c": 0.0}]}
    }]});
    (write(dir, "model.json", &model), write(dir, "spec.json", &spec))
}

#[test]
fn verify_reports_status_through_exit_code() {
    let dir = TempDir::new().unwrap();
    let (model, spec) = halfline(&dir, 2.0);
    let out = cgr(&["verify", "--model", s(&model), "--spec", s(&spec)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["results"][0]["status"], "verified");
    assert_eq!(doc["config"]["searcher"], "vertex");

    // A falsifier alone cannot certify a satisfied property.
    let out = cgr(&["verify", "--model", s(&model), "--spec", s(&spec), "--searcher", "bim"]);
    assert_eq!(code(&out), 2);

    let (model, spec) = halfline(&dir, 0.5);
    let res = dir.path().join("res.json");
    let out = cgr(&["verify", "--model", s(&model), "--spec", s(&spec), "--out", s(&res)]);
    assert_eq!(code(&out), 1);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&res).unwrap()).unwrap();
    assert_eq!(doc["results"][0]["status"], "counterexample");
    assert_eq!(doc["results"][0]["x"], json!([1.0]));
    assert!((doc["results"][0]["value"].as_f64().unwrap() + 0.5).abs() < 1e-12);
}

#[test]
fn bad_input_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let (model, _) = halfline(&dir, 1.0);
    let junk = dir.path().join("junk.json");
    std::fs::write(&junk, "{ not json").unwrap();
    assert_eq!(code(&cgr(&["verify", "--model", s(&model), "--spec", s(&junk)])), 64);
    assert_eq!(code(&cgr(&["verify", "--model", s(&model)])), 64);
    assert_eq!(code(&cgr(&["frobnicate"])), 64);
    let cfg = write(&dir, "cfg.json", &json!({"no_such_field": 1}));
    let (model, spec) = halfline(&dir, 1.0);
    let out = cgr(&["verify", "--model", s(&model), "--spec", s(&spec), "--config", s(&cfg)]);
    assert_eq!(code(&out), 64);
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&cgr(&["verify", "--model", s(&missing), "--spec", s(&spec)])), 74);
    assert_eq!(code(&cgr(&["--help"])), 0);
}

#[test]
fn repair_moves_the_bias_just_past_the_worst_input() {
    let dir = TempDir::new().unwrap();
    let (model, spec) = halfline(&dir, 0.0);
    let cfg = write(&dir, "cfg.json", &json!({"remover": "penalty", "trainable": [1]}));
    let repaired = dir.path().join("repaired.json");
    let trace = dir.path().join("trace.jsonl");
    let out = cgr(&[
        "repair", "--model", s(&model), "--spec", s(&spec), "--config", s(&cfg),
        "--remover", "qp", "--out", s(&repaired), "--trace", s(&trace),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(&repaired).unwrap()).unwrap();
    let theta = m["layers"][0]["bias"][0].as_f64().unwrap();
    assert!((1.0..=1.02).contains(&theta), "{theta}");
    assert_eq!(m["layers"][0]["weights"][0][0], json!(-1.0));

    let lines: Vec<Value> = std::fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines[0]["record"], "config");
    // The flag wins over the file.
    assert_eq!(lines[0]["config"]["remover"], "qp");
    assert_eq!(lines[1]["record"], "header");
    assert_eq!(lines.last().unwrap()["status"], "repaired");
}

#[test]
fn scripted_repair_hits_the_step_limit() {
    let dir = TempDir::new().unwrap();
    let (model, spec) = halfline(&dir, 0.0);
    let script = write(&dir, "script.json", &json!({"sequence": [[0.1], [0.2], [0.3], [0.4]], "fallback": "vertex"}));
    let searcher = format!("script:{}", s(&script));
    let out = cgr(&[
        "repair", "--model", s(&model), "--spec", s(&spec), "--searcher", &searcher,
        "--remover", "qp", "--max-steps", "2",
    ]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step_limit"));
    assert!(out.stdout.is_empty());
}

#[test]
fn pathology_writes_the_iterate_table() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("p.csv");
    let out = cgr(&["pathology", "unbounded-relu", "--steps", "4", "--out", s(&csv)]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# config "));
    assert_eq!(lines.len(), 2 + 5);
    let last: Vec<&str> = lines[6].split(',').collect();
    assert_eq!(last[0], "4");
    assert_eq!(last[1].parse::<f64>().unwrap(), 4.0);
    assert_eq!(code(&cgr(&["pathology", "no-such-case"])), 64);
}

#[test]
fn rmi_pipeline_round_trips() {
    let dir = TempDir::new().unwrap();
    let d1 = dir.path().join("a.txt");
    let d2 = dir.path().join("b.txt");
    for d in [&d1, &d2] {
        let out = cgr(&["rmi", "gen", "--seed", "3", "--n", "2000", "--out", s(d)]);
        assert_eq!(code(&out), 0);
    }
    let a = std::fs::read(&d1).unwrap();
    assert_eq!(a, std::fs::read(&d2).unwrap());
    assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 2001);

    let index = dir.path().join("index.json");
    let out = cgr(&["rmi", "build", "--data", s(&d1), "--k", "4", "--epochs", "2", "--seed", "3", "--out", s(&index)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&index).unwrap()).unwrap();
    assert_eq!(doc["config"]["k"], 4);
    assert_eq!(doc["index"]["k"], 4);

    let spec = dir.path().join("spec.json");
    let model = dir.path().join("model.json");
    let out = cgr(&[
        "rmi", "spec", "--index", s(&index), "--data", s(&d1), "--block", "1", "--epsilon", "10",
        "--out", s(&spec), "--model-out", s(&model),
    ]);
    assert_eq!(code(&out), 0);
    // A tight bound leaves counterexamples the qp remover proves it cannot fix.
    let out = cgr(&["repair", "--model", s(&model), "--spec", s(&spec), "--remover", "qp"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("removal_failed"));

    let out = cgr(&["rmi", "spec", "--index", s(&index), "--data", s(&d1), "--stage1", "--out", s(&spec)]);
    assert_eq!(code(&out), 0);
    let out = cgr(&["rmi", "spec", "--index", s(&index), "--data", s(&d1), "--block", "9", "--out", s(&spec)]);
    assert_eq!(code(&out), 64);
}

#[test]
fn experiment_writes_one_row_per_cell() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("cells.csv");
    let out = cgr(&[
        "rmi", "experiment", "--num-rmis", "1", "--n-keys", "1000", "--k", "3", "--epsilons", "5,50",
        "--methods", "qp,ouroboros", "--epochs", "2", "--out", s(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(rows[0].starts_with("rmi_id,block,epsilon,method,status"));
    assert_eq!(rows.len() - 1, 3 * 2 * 2);
    let summary = String::from_utf8(out.stdout).unwrap();
    assert!(summary.starts_with("epsilon,method,successes,total"));
    assert_eq!(summary.lines().count(), 1 + 2 * 2);

    let out = cgr(&["rmi", "experiment", "--methods", "qp,magic"]);
    assert_eq!(code(&out), 64);
}
