use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motionloc")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

/// Small dataset plus a two-epoch checkpoint.
fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let ds = dir.join("ds.ndjson");
    let o = run(&["gen", "--dataset", p(&ds), "--train", "6", "--val", "2", "--test", "3", "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 2, "batch_size": 3, "d": 16, "d_word": 16}"#).unwrap();
    let run_dir = dir.join("run");
    let o = run(&["train", "--dataset", p(&ds), "--out-dir", p(&run_dir), "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    (ds, run_dir.join("last.ckpt"))
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let o = run(&["stats", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn missing_required_flag_is_named() {
    let o = run(&["train", "--out-dir", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--dataset"));
    let o = run(&["locate", "--dataset", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--model"));
}

#[test]
fn missing_input_file_is_a_runtime_failure() {
    let o = run(&["stats", "--dataset", "/nonexistent/ds.ndjson"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds.ndjson");
    assert_eq!(run(&["gen", "--dataset", p(&ds), "--train", "2", "--val", "0", "--test", "1"]).status.code(), Some(0));
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"learning_rate": 3}"#).unwrap();
    let o = run(&["train", "--dataset", p(&ds), "--out-dir", p(dir.path()), "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    std::fs::write(&cfg, r#"{"lr": -1.0}"#).unwrap();
    let o = run(&["train", "--dataset", p(&ds), "--out-dir", p(dir.path()), "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_is_deterministic_and_stats_report_splits() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ndjson");
    let b = dir.path().join("b.ndjson");
    for f in [&a, &b] {
        assert_eq!(run(&["gen", "--dataset", p(f), "--train", "4", "--val", "1", "--test", "2", "--seed", "9"]).status.code(), Some(0));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let o = run(&["stats", "--dataset", p(&a), "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v = stdout_json(&o);
    let queries: u64 = v["splits"].as_array().unwrap().iter().map(|s| s["queries"].as_u64().unwrap()).sum();
    assert_eq!(queries, 7);
}

#[test]
fn train_locate_eval_cmr_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, ckpt) = fixture(dir.path());

    let metrics = std::fs::read_to_string(ckpt.with_file_name("metrics.ndjson")).unwrap();
    let first: Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["epoch", "step", "L_Seq", "L_Span", "L_rec", "L_Align", "total", "lr"] {
        assert!(first.get(key).is_some(), "metrics line lacks {key}");
    }

    let o = run(&["locate", "--model", p(&ckpt), "--dataset", p(&ds), "--query-id", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    let (t_s, t_e, p_se) = (v["t_s"].as_f64().unwrap(), v["t_e"].as_f64().unwrap(), v["p_se"].as_f64().unwrap());
    assert!(0.0 <= t_s && t_s <= t_e);
    assert!((0.0..=1.0).contains(&p_se));

    let o = run(&["locate", "--model", p(&ckpt), "--dataset", p(&ds), "--query-id", "999"]);
    assert_eq!(o.status.code(), Some(1));

    let out = dir.path().join("eval");
    let o = run(&["eval", "--model", p(&ckpt), "--dataset", p(&ds), "--out-dir", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("IoU@0.5") && table.contains("assigned"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("eval_test.json")).unwrap()).unwrap();
    assert!(report["normal"]["mIoU"].is_number());

    let o = run(&["cmr", "--corpus", p(&ds), "--model", p(&ckpt), "--query-id", "0", "--k", "4", "--top-n", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    let ranking = v["ranking"].as_array().unwrap();
    assert!(!ranking.is_empty() && ranking.len() <= 3);
    let scores: Vec<f64> = ranking.iter().map(|r| r["cmr_score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    for r in ranking {
        for key in ["motion_id", "t_s", "t_e", "cmr_score", "rel"] {
            assert!(r.get(key).is_some());
        }
    }
    assert_eq!(v["dcg"].as_array().unwrap().len(), 3);
}

#[test]
fn resume_continues_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, _) = fixture(dir.path());
    let cfg = dir.path().join("cfg.json");
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let args = |out: &Path| vec!["train".to_string(), "--dataset".into(), p(&ds).into(), "--out-dir".into(), p(out).into(), "--config".into(), p(&cfg).into()];
    assert_eq!(run(&args(&full).iter().map(String::as_str).collect::<Vec<_>>()).status.code(), Some(0));
    let mut a = args(&part);
    a.extend(["--stop-after".into(), "1".into()]);
    assert_eq!(run(&a.iter().map(String::as_str).collect::<Vec<_>>()).status.code(), Some(0));
    let mut a = args(&part);
    a.extend(["--resume".into(), p(&part.join("last.ckpt")).into()]);
    assert_eq!(run(&a.iter().map(String::as_str).collect::<Vec<_>>()).status.code(), Some(0));
    assert_eq!(std::fs::read(full.join("metrics.ndjson")).unwrap(), std::fs::read(part.join("metrics.ndjson")).unwrap());
    assert_eq!(std::fs::read(full.join("last.ckpt")).unwrap(), std::fs::read(part.join("last.ckpt")).unwrap());
}

#[test]
fn gradcheck_small_run_passes() {
    let o = run(&["gradcheck", "--cases", "2", "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert!(v["rows"].as_array().unwrap().len() > 20);
}
