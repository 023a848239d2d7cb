mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn headsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_headsim"))
        .args(args)
        .env_remove("HEADSIM_BUNDLE")
        .env_remove("HEADSIM_SEED")
        .env_remove("HEADSIM_THREADS")
        .output()
        .expect("spawn headsim")
}

fn ok(args: &[&str]) -> Output {
    let out = headsim(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_args_is_usage_error() {
    let out = headsim(&[]);
    assert_eq!(out.status.code(), Some(64));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(headsim(&["transmogrify"]).status.code(), Some(64));
}

#[test]
fn bad_bundle_exits_65_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = headsim(&["similarity", "--bundle", s(dir.path()), "--pairing", "OQ"]);
    assert_eq!(out.status.code(), Some(65));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[bundle]: "), "{err}");
}

#[test]
fn rank_deficient_weight_exits_70() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = common::synthetic_model(3);
    m.head_mut(common::head(2, 7)).w_q.fill(0.0);
    m.write_bundle(dir.path(), headsim::tensor_io::DType::F64).unwrap();
    let out = headsim(&["similarity", "--bundle", s(dir.path()), "--pairing", "QQ", "--mode", "same_type"]);
    assert_eq!(out.status.code(), Some(70));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[numerical]: ") && err.contains("L2H7.Q"), "{err}");
}

#[test]
fn similarity_csv_has_every_strict_pair() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("b");
    common::write_synthetic_bundle(&bundle, 1);
    let out = dir.path().join("oq.csv");
    ok(&["similarity", "--bundle", s(&bundle), "--metric", "pk", "--pairing", "OQ", "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("pairing,metric,"));
    assert_eq!(lines.count(), 9504);
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("oq.csv.config.json")).unwrap()).unwrap();
    assert_eq!(sidecar["command"], "similarity");
    assert_eq!(sidecar["args"]["metric"], "pk");
}

#[test]
fn wiring_dot_has_k_edges_per_pairing_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("b");
    common::write_synthetic_bundle(&bundle, 2);
    let out = dir.path().join("w.dot");
    let run = || {
        ok(&[
            "wiring", "--bundle", s(&bundle), "--k", "20", "--metric", "pk", "--pairings", "OQ,OK,OV",
            "--threads", "1", "--out", s(&out),
        ]);
        fs::read(&out).unwrap()
    };
    let a = run();
    let text = String::from_utf8(a.clone()).unwrap();
    assert!(text.starts_with("// config: "));
    assert_eq!(text.matches(" -> ").count(), 60);
    fs::remove_file(&out).unwrap();
    assert_eq!(run(), a);
}

#[test]
fn wiring_json_with_labels_and_classes() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("b");
    common::write_synthetic_bundle(&bundle, 2);
    let out = dir.path().join("w.json");
    ok(&["wiring", "--bundle", s(&bundle), "--k", "3", "--pairings", "OV", "--label-tokens", "2", "--out", s(&out)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let edges = v["result"]["edges"].as_array().unwrap();
    assert_eq!(edges.len(), 3);
    assert_eq!(edges[0]["opacity"], 1.0);
    let labels = v["result"]["labels"].as_object().unwrap();
    assert!(labels.values().all(|l| l.as_array().unwrap().len() == 2));
}

#[test]
fn hubs_kl_norms_and_head_scores() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("b");
    common::write_synthetic_bundle(&bundle, 4);
    let hubs = dir.path().join("hubs.csv");
    ok(&["hubs", "--bundle", s(&bundle), "--pairings", "OV", "--out", s(&hubs)]);
    // 132 inlet rows (layers 1..11) plus 132 outlet rows (layers 0..10).
    assert_eq!(fs::read_to_string(&hubs).unwrap().lines().count(), 1 + 132 + 132);

    let kl = dir.path().join("kl.csv");
    ok(&["kl-heatmap", "--bundle", s(&bundle), "--out", s(&kl)]);
    let text = fs::read_to_string(&kl).unwrap();
    assert_eq!(text.lines().next().unwrap(), "source,Q,K,V,O");
    assert_eq!(text.lines().count(), 5);

    let norms = dir.path().join("norms.csv");
    ok(&["norms", "--bundle", s(&bundle), "--out", s(&norms)]);
    assert_eq!(fs::read_to_string(&norms).unwrap().lines().count(), 13);

    let scores = dir.path().join("id.csv");
    ok(&["head-scores", "--bundle", s(&bundle), "--kind", "identity", "--out", s(&scores)]);
    let text = fs::read_to_string(&scores).unwrap();
    let best = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .max_by(|a, b| a[3].parse::<f64>().unwrap().total_cmp(&b[3].parse::<f64>().unwrap()))
        .unwrap();
    assert_eq!((best[1], best[2]), ("0", "3"));
}

#[test]
fn project_unembed_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("b");
    common::write_synthetic_bundle(&bundle, 5);
    let tokens = dir.path().join("tokens.json");
    ok(&[
        "project-unembed", "--bundle", s(&bundle), "--head", "L4H7", "--wtype", "O", "--prep",
        "center-normalize", "--top", "10", "--out", s(&tokens),
    ]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&tokens).unwrap()).unwrap();
    assert_eq!(v["result"]["head"], "L4H7.O");
    assert_eq!(v["result"]["top_k"].as_array().unwrap().len(), 10);

    let report = dir.path().join("det.json");
    ok(&["evaluate", "--bundle", s(&bundle), "--metric", "cs", "--task", "detection", "--out", s(&report)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let cells = v["result"].as_array().unwrap();
    assert_eq!(cells.len(), 3);
    assert!(cells.iter().all(|c| (0.0..=1.0).contains(&c["pr_auc"].as_f64().unwrap())));

    let report = dir.path().join("cls.json");
    ok(&["evaluate", "--bundle", s(&bundle), "--metric", "pk", "--task", "classification", "--out", s(&report)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let roc = v["result"]["mean_roc_auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&roc));
}

#[test]
fn preprocess_then_score() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("b");
    common::write_synthetic_bundle(&bundle, 6);
    let prep = dir.path().join("p");
    ok(&["preprocess", "--in", s(&bundle), "--out", s(&prep), "--no-fold-bias"]);
    let b = headsim::load_bundle(&prep).unwrap();
    assert!(b.contains("patterns.1.11.11"));
    let w = headsim::ModelWeights::from_bundle(&b, true).unwrap();
    let wo = &w.head(common::head(3, 3)).w_o;
    for c in wo.column_iter() {
        assert!(c.sum().abs() < 1e-5);
    }
    let out = dir.path().join("x.csv");
    ok(&["similarity", "--bundle", s(&prep), "--pairing", "OV,OK", "--metric", "procrustes", "--out", s(&out)]);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1 + 2 * 9504);
}

#[test]
fn rand_baseline_writes_samples_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dist.csv");
    let o = ok(&["rand-baseline", "--d", "32", "--m", "4", "--pairs", "500", "--seed", "9", "--out", s(&out)]);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 501);
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["result"]["n"], 500);
    assert_eq!(stats["seed"], 9);
    let again = ok(&["rand-baseline", "--d", "32", "--m", "4", "--pairs", "500", "--seed", "9", "--threads", "1"]);
    let text = String::from_utf8(again.stdout).unwrap();
    assert!(text.starts_with(&fs::read_to_string(&out).unwrap()));
}

#[test]
fn env_overrides_seed() {
    let a = Command::new(env!("CARGO_BIN_EXE_headsim"))
        .args(["rand-baseline", "--d", "8", "--m", "2", "--pairs", "3"])
        .env("HEADSIM_SEED", "11")
        .output()
        .unwrap();
    let b = headsim(&["rand-baseline", "--d", "8", "--m", "2", "--pairs", "3", "--seed", "11"]);
    assert_eq!(a.stdout, b.stdout);
}
