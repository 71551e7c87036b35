use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[train]
total_steps = 3000
learning_starts = 500
batch_size = 32
update_every = 40
log_every = 1000

[feedback]
budget = 12
queries_per_session = 4
start_feedback = 1000
session_frequency = 1000
predictor_epochs = 2

[feedback.ensemble]
members = 3
hidden = 16
lr = 0.0003

[agent]
hidden = 16

[discriminator]
hidden = 16
"#;

fn srsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srsd")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn train(dir: &Path, name: &str, config: &Path, seed: u64) -> std::path::PathBuf {
    let out = dir.join(name);
    let seed = seed.to_string();
    let args = ["train", "--config", config.to_str().unwrap(), "--seed", &seed, "--coverage-skills", "20", "--out", out.to_str().unwrap()];
    ok(srsd(&args));
    out
}

#[test]
fn prop1_prints_csv_near_closed_forms() {
    let text = ok(srsd(&["prop1", "--classes", "3,9", "--p", "0,0.5", "--trials", "200000", "--seed", "1"]));
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "classes,p,p_sem_hat,p_sem,p_pref_hat,p_pref");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in rows {
        assert!((r[2] - r[3]).abs() < 0.01 && (r[4] - r[5]).abs() < 0.01, "{r:?}");
    }
}

#[test]
fn train_eval_and_metrics_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let mut ablated = SMALL.to_string();
    ablated.push_str("\n[ablation]\nno_relevance = true\n");
    let ablated_config = dir.path().join("ablated.toml");
    fs::write(&ablated_config, ablated).unwrap();

    let a = train(dir.path(), "a", &config, 1);
    let b = train(dir.path(), "b", &ablated_config, 1);
    for run in [&a, &b] {
        for f in ["checkpoint/manifest.json", "checkpoint/replay.bin", "metrics.csv", "record.json", "config.toml"] {
            assert!(run.join(f).exists(), "{}", run.join(f).display());
        }
    }
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("record.json")).unwrap()).unwrap();
    assert_eq!(record["steps"], 3000);
    let labels: u64 = record["label_counts"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    assert!(labels <= 12);

    let report = dir.path().join("eval.json");
    ok(srsd(&[
        "eval",
        "--checkpoint",
        a.join("checkpoint").to_str().unwrap(),
        "--mode",
        "few-shot",
        "--out",
        report.to_str().unwrap(),
    ]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(report["mode"], "few_shot");
    assert_eq!(report["few_shot"].as_array().unwrap().len(), 4);

    let summary = ok(srsd(&[
        "metrics",
        "--runs",
        a.join("record.json").to_str().unwrap(),
        "--baseline",
        b.join("record.json").to_str().unwrap(),
        "--bootstrap",
        "100",
    ]));
    assert!(summary.contains("P(runs > baseline) on f1"), "{summary}");
}

#[test]
fn train_refuses_human_source_and_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = srsd(&["train", "--source", "human", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("serve"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[feedback]\nbudget = -3\n").unwrap();
    let out = srsd(&["train", "--config", bad.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert!(!out.status.success());
}
