use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{"sim": {"experiences": 3, "frames": 30, "route_length": 12.0, "write_feature_maps": true}, "pairs": 20, "heldout_pairs": 5, "epochs": 1}"#;

fn seqloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqloc")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The final JSON line on stderr.
fn failure(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.lines().last().expect("stderr is empty")).unwrap()
}

#[test]
fn missing_dataset_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = seqloc(&["--out-dir", s(dir.path()), "pipeline", "--dataset", s(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    let f = failure(&o);
    assert_eq!(f["error"], "MissingDataset");
    assert!(f["path"].as_str().unwrap().contains("nowhere"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"epocs": 3}"#).unwrap();
    let o = seqloc(&["--config", s(&cfg), "--out-dir", s(dir.path()), "pipeline", "--simulate"]);
    assert_eq!(o.status.code(), Some(2));
    let f = failure(&o);
    assert_eq!(f["error"], "InvalidConfig");
    assert!(f["message"].as_str().unwrap().contains("epocs"));
}

#[test]
fn zero_threads_is_a_usage_error() {
    let o = seqloc(&["--threads", "0", "simulate", "--dataset", "unused"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failed_stage_keeps_earlier_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"sim": {"experiences": 3, "frames": 30, "route_length": 12.0}, "validation": {"e_sq": -1.0}}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = seqloc(&["--config", s(&cfg), "--out-dir", s(&out), "pipeline", "--simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(failure(&o)["stage"], "validate");
    assert!(out.join("dataset/meta.json").exists());
    assert!(out.join("raw_1_0.csv").exists());
    assert!(out.join("diff_1_0.csv").exists());
    assert!(!out.join("graph.json").exists());
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path();
    let c = s(&cfg);
    let run = |args: &[&str]| {
        let mut all = vec!["--config", c];
        all.extend_from_slice(args);
        let o = Command::new(env!("CARGO_BIN_EXE_seqloc")).current_dir(out).args(&all).output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["simulate", "--dataset", "ds"]);
    run(&["seqslam", "--dataset", "ds", "--query", "1", "--ref", "0", "--out", "raw.csv"]);
    run(&["validate", "--dataset", "ds", "--query", "1", "--ref", "0", "--raw", "raw.csv", "--out", "matches.csv"]);
    run(&["graph", "--dataset", "ds", "--out", "g/graph.json"]);
    run(&["sample", "--graph", "g/graph.json", "--src", "2", "--dst", "0", "--n", "20", "--out", "pairs.csv"]);
    run(&["pose", "--dataset", "ds", "--src", "0:10", "--tgt", "1:10", "--out", "pose.json"]);
    run(&["train", "--dataset", "ds", "--pairs", "pairs.csv", "--epochs", "1", "--model-out", "m.bin", "--report", "r.csv"]);
    run(&["detect", "--dataset", "ds", "--model", "m.bin", "--frame", "0:5", "--out", "kp.csv"]);
    run(&["eval", "--dataset", "ds", "--model", "m.bin", "--pairs", "pairs.csv", "--out", "eval.csv"]);

    let report = std::fs::read_to_string(out.join("r.csv")).unwrap();
    assert_eq!(report.lines().next().unwrap(), "epoch,mean_loss,mean_inliers,mean_rot_err_deg,mean_trans_err_m,skipped");
    assert_eq!(report.lines().count(), 3);
    let eval = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().next().unwrap(), "pair,rot_err_deg,trans_err_m,inliers");
    assert_eq!(eval.lines().count(), 21);
    let pose: Value = serde_json::from_str(&std::fs::read_to_string(out.join("pose.json")).unwrap()).unwrap();
    assert_eq!(pose["transform"]["matrix"].as_array().unwrap().len(), 16);
}
