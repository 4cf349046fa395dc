use std::fs;
use std::path::Path;

use sifed_core::experiment::{evaluate_checkpoint, read_jsonl, run_experiment, Split};
use sifed_core::{ExperimentConfig, ExperimentError};

fn small(extra: &str) -> ExperimentConfig {
    let text = format!(
        "seed = 11\nrounds = 6\nclients_per_round = 4\nvariant = si_cifg\nmodel.embed_dim = 8\nmodel.hidden_dim = 12\n\
         client.learning_rate = 0.5\ncorpus.clients = 20\ncorpus.words = 25\ncorpus.max_sequences = 12\neval.every = 3\n{extra}"
    );
    ExperimentConfig::parse_str(&text, &[]).unwrap()
}

fn run_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_metrics_checkpoints_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_experiment(small("checkpoint.every = 2"), dir.path(), None).unwrap();
    assert_eq!(summary.rounds_completed, 6);

    let records = read_jsonl(&summary.metrics_path).unwrap();
    let eval_rounds: Vec<u64> = records.iter().filter(|r| r.split == Split::Eval).map(|r| r.round).collect();
    let train_rounds: Vec<u64> = records.iter().filter(|r| r.split == Split::TrainSample).map(|r| r.round).collect();
    assert_eq!(eval_rounds, vec![0, 3, 6]);
    assert_eq!(train_rounds, (1..=6).collect::<Vec<_>>());
    for r in &records {
        assert!(!r.diverged);
        assert_eq!(r.wall_seconds, 0.0);
        assert!((r.perplexity - r.loss.exp()).abs() <= 1e-12 * r.perplexity);
        assert!(r.counted_tokens > 0);
    }
    assert!(records.iter().filter(|r| r.split == Split::TrainSample).all(|r| r.upload_bytes > 0));

    for name in ["checkpoint-000002.ckpt", "checkpoint-000004.ckpt", "checkpoint-000006.ckpt", "final.ckpt"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let meta = run_json(dir.path());
    assert_eq!(meta["config"]["rounds"], 6);
    assert!(meta["vocab_size"].as_u64().unwrap() > 3);
    assert!(meta["privacy"].is_null());

    let last = records.iter().rev().find(|r| r.split == Split::Eval).unwrap();
    let again = evaluate_checkpoint(small(""), &summary.checkpoint_path).unwrap();
    assert_eq!(&again, last);
}

#[test]
fn training_lowers_held_out_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("");
    cfg.rounds = 30;
    cfg.eval.every = 30;
    let summary = run_experiment(cfg, dir.path(), None).unwrap();
    let evals: Vec<f64> =
        read_jsonl(&summary.metrics_path).unwrap().iter().filter(|r| r.split == Split::Eval).map(|r| r.loss).collect();
    assert!(evals[1] < evals[0], "{evals:?}");
}

#[test]
fn resume_rejects_a_different_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_experiment(small(""), dir.path(), None).unwrap();
    let mut other = small("");
    other.client.learning_rate = 0.25;
    let err = evaluate_checkpoint(other, &summary.checkpoint_path).unwrap_err();
    assert!(matches!(err, ExperimentError::Checkpoint(_)), "{err}");
}

#[test]
fn resume_accepts_a_longer_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let first = run_experiment(small(""), &dir.path().join("a"), None).unwrap();
    let mut longer = small("");
    longer.rounds = 8;
    let out = dir.path().join("b");
    let summary = run_experiment(longer, &out, Some(&first.checkpoint_path)).unwrap();
    assert_eq!(summary.rounds_completed, 8);
    let rounds: Vec<u64> = read_jsonl(&summary.metrics_path).unwrap().iter().map(|r| r.round).collect();
    assert_eq!(rounds.first(), Some(&7));
    assert_eq!(rounds.last(), Some(&8));
}

#[test]
fn csv_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_experiment(small("output.metrics_format = csv"), dir.path(), None).unwrap();
    assert!(summary.metrics_path.ends_with("metrics.csv"));
    let text = fs::read_to_string(&summary.metrics_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("round,split,loss"));
    assert_eq!(lines.len(), 1 + 3 + 6);
    assert!(lines[1].starts_with("0,eval,"));
}

#[test]
fn private_run_records_its_privacy_settings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(
        "dp.enabled = true\ndp.clip_norm = 0.5\ndp.noise_multiplier = 0.3\ndp.reported_zcdp = 0.8\n\
         server.optimizer = sgdm\nserver.learning_rate = 1.0\nserver.momentum = 0.9",
    );
    run_experiment(cfg, dir.path(), None).unwrap();
    let privacy = &run_json(dir.path())["privacy"];
    assert_eq!(privacy["noise_multiplier"], 0.3);
    assert_eq!(privacy["clients_per_round"], 4);
    assert_eq!(privacy["reported_zcdp"], 0.8);
}

#[test]
fn quantized_uploads_are_smaller() {
    let dir = tempfile::tempdir().unwrap();
    let plain = run_experiment(small(""), &dir.path().join("p"), None).unwrap();
    let quant = run_experiment(small("quant.enabled = true\nquant.bits = 8"), &dir.path().join("q"), None).unwrap();
    let bytes = |p: &Path| read_jsonl(p).unwrap().iter().map(|r| r.upload_bytes).max().unwrap();
    let (b_plain, b_quant) = (bytes(&plain.metrics_path), bytes(&quant.metrics_path));
    // 8 of 64 bits per coordinate, plus a small per-tensor header.
    assert!(b_quant * 6 < b_plain, "{b_quant} vs {b_plain}");
}

#[test]
fn divergence_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("server.learning_rate = 1000");
    cfg.client.learning_rate = 50.0;
    let err = run_experiment(cfg, dir.path(), None).unwrap_err();
    assert!(matches!(err, ExperimentError::Diverged { .. }), "{err}");
    let records = read_jsonl(&dir.path().join("metrics.jsonl")).unwrap();
    assert!(records.last().unwrap().diverged);
}
