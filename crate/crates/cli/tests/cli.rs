use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn argf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_argf")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = argf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) -> String {
    let data = dir.join("data");
    ok(&["synth", "--out", p(&data), "--num_classes", "3", "--dim", "5", "--count", "150", "--seed", "2"]);
    data.to_str().unwrap().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_eval_and_export_round_trip() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path());
    let model = dir.path().join("model.json");
    let report = dir.path().join("train.json");
    ok(&[
        "train", "--data", &data, "--k", "4", "--epochs", "2", "--batch_size", "16", "--deterministic", "--model",
        p(&model), "--out", p(&report),
    ]);
    let r = json(&report);
    assert_eq!(r["config"]["k"], 4);
    assert_eq!(r["config"]["batch_size"], 16);
    assert_eq!(r["epochs"].as_array().unwrap().len(), 2);
    assert!(r["wall_clock_secs"].is_null());

    let eval = ok(&["eval", "--model", p(&model), "--data", &data]);
    let e: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert_eq!(e["split"], "test");
    assert_eq!(e["accuracy"], r["accuracy"]);
    assert_eq!(e["confusion"], r["confusion"]);

    let emb = dir.path().join("emb.csv");
    ok(&["export-embeddings", "--model", p(&model), "--data", &data, "--out", p(&emb)]);
    let text = fs::read_to_string(&emb).unwrap();
    assert_eq!(text.lines().count(), 150);
    assert!(text.lines().all(|l| l.split(',').count() == 13));

    let graph = dir.path().join("graph.csv");
    ok(&["export-graph", "--model", p(&model), "--data", &data, "--split", "val", "--out", p(&graph)]);
    let text = fs::read_to_string(&graph).unwrap();
    assert!(text.lines().count() > 0);
    assert!(text.lines().all(|l| l.split(',').count() == 12));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"k": 3, "lambda": 0.25, "epochs": 1, "fusion": "lmf"}"#).unwrap();
    let out = ok(&["train", "--data", &data, "--config", p(&cfg), "--lambda", "0.75", "--no_adv"]);
    let r: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(r["config"]["k"], 3);
    assert_eq!(r["config"]["lambda"], 0.75);
    assert_eq!(r["config"]["fusion"], "lmf");
    assert_eq!(r["config"]["ablations"]["no_adv"], true);
}

#[test]
fn invalid_configuration_fails() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path());
    let out = argf(&["train", "--data", &data, "--lambda", "2", "--epochs", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"kay": 3}"#).unwrap();
    assert!(!argf(&["train", "--data", &data, "--config", p(&cfg)]).status.success());
    assert!(!argf(&["train", "--data", p(&dir.path().join("missing"))]).status.success());
}

#[test]
fn ablate_and_compare_print_tables() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path());
    let out = dir.path().join("ablate.json");
    let table = ok(&["ablate", "--data", &data, "--k", "3", "--epochs", "1", "--deterministic", "--out", p(&out)]);
    for name in ["full", "no_adv", "no_classifier", "no_decoder"] {
        assert!(table.contains(name), "{table}");
    }
    assert_eq!(json(&out).as_array().unwrap().len(), 4);
    let table = ok(&["compare", "--data", &data, "--k", "3", "--epochs", "1", "--deterministic"]);
    for name in ["concat_fc", "mult_fc", "weighted_avg", "tensor", "lmf", "gfn"] {
        assert!(table.contains(name), "{table}");
    }
}

#[test]
fn gridsearch_ranks_points() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path());
    let grid = dir.path().join("grid.json");
    fs::write(&grid, r#"{"k": [2, 3], "lambda": [0.5]}"#).unwrap();
    let out = dir.path().join("grid_out.json");
    ok(&["gridsearch", "--grid", p(&grid), "--data", &data, "--epochs", "1", "--deterministic", "--out", p(&out)]);
    let v = json(&out);
    let entries = v.as_array().unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0]["rank"], 1);
    assert!(entries[0]["test"].is_object());
    assert!(entries[1]["test"].is_null());
}

#[test]
fn gradcheck_passes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("grad.json");
    ok(&["gradcheck", "--seed", "3", "--out", p(&out)]);
    let v = json(&out);
    let suites = v.as_array().unwrap();
    assert!(suites.len() >= 25);
    assert!(suites.iter().all(|s| s["passed"] == true));
}
