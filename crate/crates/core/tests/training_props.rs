//! Training-loop contracts on small fixtures.

use subformer::corpus::{load_corpus, parse_corpus, Corpus, SplitTag};
use subformer::model::{ModelConfig, Prepared, SubFormer};
use subformer::training::{
    evaluate, fit, init_head_bias, prepare_corpus, run_batch, train_corpus, SchedulerKind, SplitKind, TrainConfig, TrainError,
};

fn fixture(name: &str) -> String {
    format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn small_model() -> ModelConfig {
    let mut c = ModelConfig::zinc();
    c.mp_hidden = 12;
    c.pe_emb_dim = 4;
    c.pe.dim = 4;
    c.transformer_hidden = 16;
    c.ffn_hidden = 16;
    c.heads = 2;
    c.transformer_layers = 1;
    c.transformer_dropout = 0.0;
    c.padding_dim = None;
    c
}

fn small_train(epochs: usize, lr: f64, seed: u64) -> TrainConfig {
    let mut t = TrainConfig::zinc();
    t.epochs = epochs;
    t.learning_rate = lr;
    t.batch_size = 8;
    t.seed = seed;
    t.scheduler = SchedulerKind::None;
    t.split_ratios = [1.0, 0.0, 0.0];
    t
}

fn head(corpus: &Corpus, n: usize) -> Corpus {
    let mut c = corpus.clone();
    c.records.truncate(n);
    c
}

fn zinc(n: usize) -> Corpus {
    head(&load_corpus(fixture("zinc_128.jsonl")).unwrap(), n)
}

fn model_and_items(corpus: &Corpus, cfg: &ModelConfig, seed: u64) -> (SubFormer, Vec<Prepared>) {
    let (prepared, _, skipped) = prepare_corpus(corpus, cfg);
    assert!(skipped.is_empty());
    let model = SubFormer::new(cfg.clone(), corpus.header.tasks, corpus.header.task_type, corpus.vocab.clone(), seed).unwrap();
    (model, prepared)
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let corpus = zinc(16);
    let (mut model, items) = model_and_items(&corpus, &small_model(), 3);
    let refs: Vec<&Prepared> = items.iter().collect();
    let before = model.params.clone();
    let out = fit(&mut model, &refs, &[], &small_train(1, 0.0, 3), |_| {}).unwrap();
    assert_eq!(model.params, before);
    assert_eq!(out.log.len(), 1);
    assert!(out.log[0].loss.is_finite());
    assert_eq!(out.log[0].lr, 0.0);
}

#[test]
fn loss_decreases_within_fifty_steps() {
    let corpus = zinc(8);
    for seed in [0, 1, 2] {
        let (mut model, items) = model_and_items(&corpus, &small_model(), seed);
        let refs: Vec<&Prepared> = items.iter().collect();
        init_head_bias(&mut model, &refs);
        // one batch per epoch, so 50 epochs are 50 optimizer steps
        let out = fit(&mut model, &refs, &[], &small_train(50, 1e-3, seed), |_| {}).unwrap();
        let first = out.log.first().unwrap().loss;
        let last = out.log.last().unwrap().loss;
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}

#[test]
fn shard_reduction_matches_single_shard() {
    let corpus = zinc(12);
    let (model, items) = model_and_items(&corpus, &small_model(), 5);
    let refs: Vec<&Prepared> = items.iter().collect();
    let one = run_batch(&model, &refs, 1, true, 9, true).unwrap();
    for shards in [2, 3, 5] {
        let many = run_batch(&model, &refs, shards, true, 9, true).unwrap();
        assert!((one.loss - many.loss).abs() < 1e-12, "{shards} shards: {} vs {}", one.loss, many.loss);
        for (a, b) in one.grads.iter().flatten().zip(many.grads.iter().flatten()) {
            assert!((a - b).abs() < 1e-12, "{shards} shards: grad {a} vs {b}");
        }
        assert_eq!(one.predictions, many.predictions);
    }
}

#[test]
fn provided_split_follows_record_tags() {
    let text = [
        r#"{"tasks": 1, "task_type": "regression"}"#,
        r#"{"id": "a", "smiles": "CCO", "targets": [1.0], "split": "train"}"#,
        r#"{"id": "b", "smiles": "CCN", "targets": [2.0], "split": "valid"}"#,
        r#"{"id": "c", "smiles": "CCC", "targets": [3.0], "split": "train"}"#,
        r#"{"id": "d", "smiles": "CC=O", "targets": [4.0], "split": "test"}"#,
    ]
    .join("\n");
    let corpus = parse_corpus(&text).unwrap();
    let mut t = small_train(2, 1e-3, 0);
    t.split = SplitKind::Provided;
    let run = train_corpus(&corpus, &small_model(), &t, |_| {}).unwrap();
    assert_eq!(run.splits.train, vec![0, 2]);
    assert_eq!(run.splits.valid, vec![1]);
    assert_eq!(run.splits.test, vec![3]);
    // train and valid rows each epoch
    assert_eq!(run.outcome.log.len(), 4);

    let untagged = parse_corpus(&text.replace(r#", "split": "test""#, "")).unwrap();
    assert_eq!(untagged.records[3].split, None);
    assert!(matches!(train_corpus(&untagged, &small_model(), &t, |_| {}), Err(TrainError::MissingSplit { id }) if id == "d"));
    assert_eq!(corpus.records[0].split, Some(SplitTag::Train));
}

#[test]
fn classification_with_missing_labels_trains() {
    let corpus = load_corpus(fixture("tox_small.jsonl")).unwrap();
    assert!(corpus.records.iter().any(|r| r.targets.contains(&None)));
    let mut t = small_train(3, 1e-3, 0);
    t.split_ratios = [0.8, 0.2, 0.0];
    let run = train_corpus(&corpus, &small_model(), &t, |_| {}).unwrap();
    assert!(run.outcome.log.iter().all(|r| r.loss.is_finite()));
    assert!(run.outcome.best_epoch >= 1);
}

#[test]
fn non_finite_loss_aborts_with_batch_ids() {
    let text = [
        r#"{"tasks": 1, "task_type": "regression"}"#,
        r#"{"id": "huge1", "smiles": "CCO", "targets": [1.5e308]}"#,
        r#"{"id": "huge2", "smiles": "CCN", "targets": [1.5e308]}"#,
    ]
    .join("\n");
    let corpus = parse_corpus(&text).unwrap();
    match train_corpus(&corpus, &small_model(), &small_train(1, 1e-3, 0), |_| {}) {
        Err(TrainError::NonFinite { epoch, batch, ids }) => {
            assert_eq!((epoch, batch), (1, 0));
            assert_eq!(ids.len(), 2);
        }
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn training_is_deterministic() {
    let corpus = zinc(10);
    let t = small_train(3, 1e-3, 4);
    let a = train_corpus(&corpus, &small_model(), &t, |_| {}).unwrap();
    let b = train_corpus(&corpus, &small_model(), &t, |_| {}).unwrap();
    assert_eq!(a.model.params, b.model.params);
    let losses = |r: &subformer::training::TrainRun| r.outcome.log.iter().map(|l| l.loss).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
}

#[test]
fn evaluation_ignores_item_order() {
    let corpus = zinc(20);
    let (model, items) = model_and_items(&corpus, &small_model(), 8);
    let forward: Vec<&Prepared> = items.iter().collect();
    let backward: Vec<&Prepared> = items.iter().rev().collect();
    let metric = subformer::training::default_metric(corpus.header.task_type);
    let a = evaluate(&model, &forward, metric, 7).unwrap();
    let b = evaluate(&model, &backward, metric, 3).unwrap();
    assert!((a.score - b.score).abs() < 1e-12, "{} vs {}", a.score, b.score);
}
