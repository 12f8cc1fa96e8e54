mod common;

use std::collections::BTreeSet;

use common::{p2i, stderr_json};
use p2i_core::dataset::SplitPlan;
use p2i_core::evaluation::MetricsReport;

#[test]
fn usage_errors_exit_one() {
    let o = p2i(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"], "usage");
    let o = p2i(&["synth", "--ckpt", "x", "--pose", "1 2 three", "--out", "y"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(p2i(&["--help"]).status.success());
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = p2i(&["split", "--data", missing.to_str().unwrap(), "--setting", "a", "--out", "s.json"]);
    assert_eq!(o.status.code(), Some(2));
    let j = stderr_json(&o);
    assert_eq!(j["exit_code"], 2);
    assert!(j["message"].as_str().unwrap().contains("nope"));
}

#[test]
fn split_on_500_frames() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    let o = p2i(&["oracle-gen", "--out", d, "--resolution", "8", "--frames", "500"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let split = dir.path().join("split.json");
    let o = p2i(&["split", "--data", d, "--setting", "a", "--missing", "1", "--out", split.to_str().unwrap()]);
    assert!(o.status.success());
    let plan = SplitPlan::load(&split).unwrap();
    let test: BTreeSet<u32> = plan.test.iter().map(|r| r.1).collect();
    assert_eq!(test, BTreeSet::from([101, 201, 301, 401]));
    assert_eq!(plan.train.len(), 496);
}

#[test]
fn train_eval_synth_bench_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let path = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let (data, split, ckpt, cfg) = (path("data"), path("split.json"), path("run"), path("cfg.json"));
    assert!(p2i(&["oracle-gen", "--out", &data, "--resolution", "16", "--frames", "110", "--sequences", "2"])
        .status
        .success());
    assert!(p2i(&["split", "--data", &data, "--setting", "b", "--test-seqs", "1", "--out", &split])
        .status
        .success());
    let run = serde_json::json!({
        "network": common::tiny_config(16),
        "train": { "batch_size": 4, "steps_phase1": 3, "steps_phase2": 3, "seed": 1 },
    });
    std::fs::write(&cfg, run.to_string()).unwrap();
    let o = p2i(&["train", "--data", &data, "--split", &split, "--config", &cfg, "--out", &ckpt]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(dir.path().join("run/report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 6);

    let out = path("metrics.json");
    let o = p2i(&["eval", "--data", &data, "--split", &split, "--ckpt", &ckpt, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: MetricsReport = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(m.per_frame.len(), 110);
    assert!(m.aggregate.psnr > 0.0 && m.baseline.psnr > 0.0);
    assert!(m.fps.unwrap().fps_mean > 0.0);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("PSNR↑") && table.contains("FPS↑"));

    let pose = "0.3 0.0 -0.2 0.9 0.0 0.4 0.0";
    let (a, b) = (path("a.png"), path("b.png"));
    for f in [&a, &b] {
        assert!(p2i(&["synth", "--ckpt", &ckpt, "--pose", pose, "--out", f, "--enhanced"]).status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let o = p2i(&["bench", "--ckpt", &ckpt, "--resolution", "32", "--timed", "10", "--json"]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["resolution"], 32);
    assert_eq!(r["reinitialized"], true);
}

#[test]
fn config_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"unknown_field": 1}}"#).unwrap();
    let data = dir.path().join("data");
    let o = std::process::Command::new(env!("CARGO_BIN_EXE_p2i"))
        .args(["train", "--data", data.to_str().unwrap(), "--split", "s", "--out", "o"])
        .env("P2I_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "config");
}
