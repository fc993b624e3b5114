use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn oodl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oodl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = oodl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) -> PathBuf {
    let d = dir.to_str().unwrap();
    ok(&["synth", "--out", d, "--n-train", "300", "--n-test", "200"]);
    dir.join("config.json")
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn edit_config(path: &Path, f: impl FnOnce(&mut Value)) {
    let mut v = json(path);
    f(&mut v);
    fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let c = cfg.to_str().unwrap();
    let results = dir.path().join("results");

    ok(&["find-oodl", "--config", c]);
    let search = json(&results.join("oodl.json"));
    assert_eq!(search["best_layer"], 2);
    assert_eq!(search["layers"].as_array().unwrap().len(), search["errors"].as_array().unwrap().len());

    ok(&["fit", "--config", c]);
    assert!(results.join("detector/detector.json").exists());
    assert!(results.join("detector/support_vectors.oodf").exists());

    ok(&["sweep-epsilon", "--config", c]);
    let sweep = json(&results.join("epsilon_sweep.json"));
    assert_eq!(sweep["grid"].as_array().unwrap().len(), 12);

    let table = ok(&["evaluate", "--config", c, "--methods", "max-softmax,ours"]);
    let ev = json(&results.join("evaluation.json"));
    let rows = ev["rows"].as_array().unwrap();
    let labels: Vec<(&str, &str)> = rows
        .iter()
        .map(|r| (r["method"].as_str().unwrap(), r["ood"].as_str().unwrap()))
        .collect();
    assert_eq!(
        labels,
        [
            ("max-softmax", "planted-shift"),
            ("ours", "planted-shift"),
            ("max-softmax", "planted-scale"),
            ("ours", "planted-scale"),
        ]
    );
    let ours = &rows[1]["metrics"];
    assert_eq!(ours["fpr_at_tpr"], 0.0);
    assert_eq!(ours["detection_error"], 2.5);
    assert_eq!(ours["auroc"], 100.0);
    assert_eq!(table, fs::read_to_string(results.join("evaluation.txt")).unwrap());
    assert!(table.lines().next().unwrap().contains("FPR@95%TPR"));
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let c = cfg.to_str().unwrap();
    let read = |name: &str| fs::read(dir.path().join("results").join(name)).unwrap();

    ok(&["find-oodl", "--config", c, "--seed", "3"]);
    let search = read("oodl.json");
    ok(&["evaluate", "--config", c, "--seed", "3", "--methods", "max-softmax,odin,md,entropy,margin,ours"]);
    let ev = read("evaluation.json");

    ok(&["find-oodl", "--config", c, "--seed", "3"]);
    ok(&["evaluate", "--config", c, "--seed", "3", "--methods", "max-softmax,odin,md,entropy,margin,ours"]);
    assert_eq!(read("oodl.json"), search);
    assert_eq!(read("evaluation.json"), ev);
}

#[test]
fn flag_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let c = cfg.to_str().unwrap();
    let out = dir.path().join("elsewhere");
    ok(&[
        "evaluate",
        "--config",
        c,
        "--out",
        out.to_str().unwrap(),
        "--layer",
        "2",
        "--tpr",
        "0.9",
        "--epsilon",
        "0.001",
        "--methods",
        "odin,ours",
    ]);
    let ev = json(&out.join("evaluation.json"));
    assert_eq!(ev["ours_layer"], 2);
    for row in ev["rows"].as_array().unwrap() {
        assert_eq!(row["metrics"]["tpr_target"], 0.9);
        assert_eq!(row["epsilon"], 0.001);
    }
    assert!(fs::read_to_string(out.join("evaluation.txt")).unwrap().contains("FPR@90%TPR"));
}

#[test]
fn self_versus_self_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    edit_config(&cfg, |v| {
        v["ood"] = serde_json::json!([v["id_test"].clone()]);
    });
    ok(&["evaluate", "--config", cfg.to_str().unwrap(), "--layer", "2", "--methods", "max-softmax,ours"]);
    let ev = json(&dir.path().join("results/evaluation.json"));
    for row in ev["rows"].as_array().unwrap() {
        let a = row["metrics"]["auroc"].as_f64().unwrap();
        assert!((a - 50.0).abs() <= 2.0, "{a}");
    }
}

#[test]
fn extract_writes_one_tensor_per_probe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    ok(&["extract", "--config", cfg.to_str().unwrap()]);
    let feats = dir.path().join("results/features/planted-train");
    let index = json(&feats.join("index.json"));
    let entries = index.as_array().unwrap();
    assert_eq!(entries.len(), 6);
    for e in entries {
        let t = oodl_core::tensor_io::read_tensor(feats.join(e["path"].as_str().unwrap())).unwrap();
        assert_eq!(t.shape()[0], 300);
    }
}

#[test]
fn train_writes_a_loadable_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    edit_config(&cfg, |v| {
        v["architecture"] = "net/arch.json".into();
        v["training"] = serde_json::json!({"epochs": 2, "learning_rate": 0.01, "batch_size": 32});
    });
    ok(&["train", "--config", cfg.to_str().unwrap(), "--seed", "1"]);
    let net = oodl_core::refnet::RefNet::load(dir.path().join("results/net")).unwrap();
    assert_eq!(net.num_classes(), 3);
    assert_eq!(json(&dir.path().join("results/train_history.json"))["epoch_losses"].as_array().unwrap().len(), 2);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(oodl(&["fit", "--config", "/nonexistent/config.json"]).status.code(), Some(2));

    let cfg = synth(dir.path());
    let c = cfg.to_str().unwrap();
    // no layer given and no previous search
    assert_eq!(oodl(&["fit", "--config", c]).status.code(), Some(2));
    // layer 3 is not a probe point
    assert_eq!(oodl(&["fit", "--config", c, "--layer", "3"]).status.code(), Some(2));
    assert_eq!(oodl(&["evaluate", "--config", c, "--methods", "bogus"]).status.code(), Some(2));
    assert_eq!(oodl(&["evaluate", "--config", c, "--tpr", "1.5"]).status.code(), Some(2));

    edit_config(&cfg, |v| v["train"] = "data/missing.json".into());
    let out = oodl(&["fit", "--config", c, "--layer", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}

#[test]
fn solver_exhaustion_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    edit_config(&cfg, |v| {
        v["ocsvm"] = serde_json::json!({"max_iter": 1, "nu": 0.1});
    });
    let out = oodl(&["fit", "--config", cfg.to_str().unwrap(), "--layer", "2"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
