//! Splitting, mini-batch training with sharded gradient evaluation, and
//! evaluation metrics.
//!
//! Each batch is cut into `shards` contiguous sub-batches that run forward
//! and backward on separate tapes in parallel. Every shard normalizes its
//! loss by the label count of the whole batch, so summing shard gradients in
//! shard order reproduces the full-batch gradient.

pub mod metrics;
pub mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{init_seed, ParamStore, Tape};
use crate::corpus::{Corpus, SplitTag, Skipped, TaskType};
use crate::model::{prepare_record, ForwardOptions, ModelConfig, ModelError, Prepared, SubFormer};

pub use metrics::{average_precision, mae, roc_auc, score, Metric, MetricReport};
pub use optim::{Adam, OptimizerKind, ReduceOnPlateau};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch} (records {ids:?})")]
    NonFinite { epoch: usize, batch: usize, ids: Vec<String> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("metric: {0}")]
    Metric(String),
    #[error("record {id} has no split tag but the config asks for the provided split")]
    MissingSplit { id: String },
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    None,
    /// Reduce on plateau.
    Rop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Random,
    /// Use the `split` tag stored with each corpus record.
    Provided,
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimization: # Epochs
    pub epochs: usize,
    /// Optimization: Learning Rate
    pub learning_rate: f64,
    /// Optimization: Optimizer
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// Decoupled weight decay, used by AdamW only.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Optimization: Scheduler
    #[serde(default = "default_scheduler")]
    pub scheduler: SchedulerKind,
    #[serde(default = "default_rop_factor")]
    pub rop_factor: f64,
    #[serde(default = "default_rop_patience")]
    pub rop_patience: usize,
    /// Optimization: Batch Size
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_split")]
    pub split: SplitKind,
    /// Train/valid/test fractions for the random split.
    #[serde(default = "default_ratios")]
    pub split_ratios: [f64; 3],
    /// Sub-batches per batch evaluated in parallel.
    #[serde(default = "default_shards")]
    pub shards: usize,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_scheduler() -> SchedulerKind {
    SchedulerKind::None
}
fn default_rop_factor() -> f64 {
    0.5
}
fn default_rop_patience() -> usize {
    10
}
fn default_split() -> SplitKind {
    SplitKind::Random
}
fn default_ratios() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}
fn default_shards() -> usize {
    1
}

impl TrainConfig {
    /// The ZINC column's optimization settings.
    pub fn zinc() -> Self {
        TrainConfig {
            epochs: 1000,
            learning_rate: 5e-4,
            optimizer: OptimizerKind::Adam,
            weight_decay: default_weight_decay(),
            scheduler: SchedulerKind::Rop,
            rop_factor: default_rop_factor(),
            rop_patience: default_rop_patience(),
            batch_size: 64,
            seed: 0,
            split: SplitKind::Random,
            split_ratios: default_ratios(),
            shards: 1,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.batch_size == 0 || self.shards == 0 || self.rop_patience == 0 {
            return Err("batch_size, shards and rop_patience must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(self.rop_factor > 0.0 && self.rop_factor < 1.0) {
            return Err(format!("rop_factor {} is outside (0, 1)", self.rop_factor));
        }
        if self.weight_decay < 0.0 {
            return Err("weight_decay must be >= 0".into());
        }
        let sum: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|&r| r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(format!("split_ratios {:?} must be nonnegative and sum to 1", self.split_ratios));
        }
        Ok(())
    }
}

/// Indices into the prepared dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then contiguous train/valid/test blocks with rounded sizes.
pub fn split_dataset(n: usize, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(init_seed(seed, "split")));
    let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let n_valid = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_valid);
    let valid = order.split_off(n_train);
    Ok(Splits { train: order, valid, test })
}

/// Splits by the tags stored with the records.
pub fn provided_split(tags: &[(String, Option<SplitTag>)]) -> Result<Splits> {
    if tags.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut s = Splits { train: vec![], valid: vec![], test: vec![] };
    for (i, (id, tag)) in tags.iter().enumerate() {
        match tag {
            Some(SplitTag::Train) => s.train.push(i),
            Some(SplitTag::Valid) => s.valid.push(i),
            Some(SplitTag::Test) => s.test.push(i),
            None => return Err(TrainError::MissingSplit { id: id.clone() }),
        }
    }
    Ok(s)
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub metric: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,split,loss,metric,lr,seconds";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{:.3}\n", r.epoch, r.split, r.loss, r.metric, r.lr, r.seconds));
    }
    out
}

pub fn default_metric(task: TaskType) -> Metric {
    match task {
        TaskType::Regression => Metric::Mae,
        TaskType::Classification => Metric::RocAuc,
    }
}

/// Targets and presence mask flattened in row-major `[items, tasks]` order.
fn flat_targets(items: &[&Prepared]) -> (Vec<f64>, Vec<bool>) {
    items.iter().flat_map(|it| it.targets.iter().map(|t| (t.unwrap_or(0.0), t.is_some()))).unzip()
}

/// Loss, predictions and summed gradient of one batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    /// Mean loss over the batch's present labels.
    pub loss: f64,
    pub labels: usize,
    pub predictions: Vec<Vec<f64>>,
    /// In parameter-store order; empty when `with_grads` is false.
    pub grads: Vec<Vec<f64>>,
}

/// Runs one batch in `shards` parallel pieces and reduces them in shard order.
pub fn run_batch(
    model: &SubFormer,
    items: &[&Prepared],
    shards: usize,
    training: bool,
    dropout_seed: u64,
    with_grads: bool,
) -> Result<BatchResult> {
    let (_, mask) = flat_targets(items);
    let labels = mask.iter().filter(|&&m| m).count();
    let denom = labels.max(1) as f64;
    let chunk = items.len().div_ceil(shards.max(1)).max(1);
    let tasks = model.tasks();
    let task_type = model.task_type();
    let pieces: Vec<(usize, &[&Prepared])> = items.chunks(chunk).enumerate().collect();
    let results = pieces
        .par_iter()
        .map(|&(s, part)| -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
            let mut t = Tape::new();
            let p = if with_grads { model.params.bind(&mut t) } else { model.params.bind_frozen(&mut t) };
            let opts = ForwardOptions { training, seed: init_seed(dropout_seed, &format!("shard{s}")), record_attention: false };
            let out = model.forward(&mut t, &p, part, None, opts)?;
            let (target, mask) = flat_targets(part);
            let loss = match task_type {
                TaskType::Regression => t.mae_loss(out.predictions, &target, &mask, Some(denom)),
                TaskType::Classification => t.bce_with_logits(out.predictions, &target, &mask, Some(denom)),
            }
            .map_err(ModelError::from)?;
            let value = t.value(loss)[0];
            let preds = t.value(out.predictions).to_vec();
            let grads = if with_grads {
                let g = t.backward(loss).map_err(ModelError::from)?;
                p.grads(&g, &model.params)
            } else {
                vec![]
            };
            Ok((value, preds, grads))
        })
        .collect::<Vec<_>>();
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(items.len());
    let mut grads: Vec<Vec<f64>> = Vec::new();
    for r in results {
        let (l, preds, g) = r?;
        loss += l;
        predictions.extend(preds.chunks(tasks).map(<[f64]>::to_vec));
        if grads.is_empty() {
            grads = g;
        } else {
            for (acc, part) in grads.iter_mut().zip(&g) {
                acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok(BatchResult { loss, labels, predictions, grads })
}

/// Eval-mode predictions and label-weighted mean loss over `items`.
pub fn predict_all(model: &SubFormer, items: &[&Prepared], batch_size: usize) -> Result<(Vec<Vec<f64>>, f64)> {
    let batches: Vec<&[&Prepared]> = items.chunks(batch_size.max(1)).collect();
    let results = batches
        .par_iter()
        .map(|b| run_batch(model, b, 1, false, 0, false))
        .collect::<Vec<_>>();
    let (mut preds, mut loss_sum, mut labels) = (Vec::with_capacity(items.len()), 0.0, 0usize);
    for r in results {
        let r = r?;
        loss_sum += r.loss * r.labels as f64;
        labels += r.labels;
        preds.extend(r.predictions);
    }
    Ok((preds, if labels > 0 { loss_sum / labels as f64 } else { f64::NAN }))
}

pub fn evaluate(model: &SubFormer, items: &[&Prepared], metric: Metric, batch_size: usize) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (preds, _) = predict_all(model, items, batch_size)?;
    let targets: Vec<Vec<Option<f64>>> = items.iter().map(|it| it.targets.clone()).collect();
    score(metric, &preds, &targets)
}

/// Sets the output bias to the training-label mean (regression) or the
/// log-odds of the positive rate (classification), per task.
pub fn init_head_bias(model: &mut SubFormer, train: &[&Prepared]) {
    let tasks = model.tasks();
    let task_type = model.task_type();
    let bias = model.head_bias_mut();
    for (k, b) in bias.iter_mut().enumerate().take(tasks) {
        let vals: Vec<f64> = train.iter().filter_map(|it| it.targets[k]).collect();
        if vals.is_empty() {
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        *b = match task_type {
            TaskType::Regression => mean,
            TaskType::Classification => {
                let p = mean.clamp(1e-3, 1.0 - 1e-3);
                (p / (1.0 - p)).ln()
            }
        };
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub log: Vec<LogRow>,
    pub best_epoch: usize,
    /// Monitored loss (validation if present, else training) at the best epoch.
    pub best_loss: f64,
    pub best_params: ParamStore,
}

/// Trains `model` in place; on return the model holds the best parameters.
pub fn fit(
    model: &mut SubFormer,
    train: &[&Prepared],
    valid: &[&Prepared],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&[LogRow]),
) -> Result<FitOutcome> {
    cfg.validate().map_err(TrainError::Config)?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let metric = default_metric(model.task_type());
    let mut opt = Adam::new(cfg.optimizer, cfg.weight_decay, &model.params);
    let mut rop = ReduceOnPlateau::new(cfg.rop_factor, cfg.rop_patience);
    let mut lr = cfg.learning_rate;
    let mut log = Vec::new();
    let mut best = (0usize, f64::INFINITY, model.params.clone());
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(init_seed(cfg.seed, &format!("epoch{epoch}"))));
        let (mut loss_sum, mut labels) = (0.0, 0usize);
        let mut preds = Vec::with_capacity(train.len());
        let mut targets = Vec::with_capacity(train.len());
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<&Prepared> = idx.iter().map(|&i| train[i]).collect();
            let seed = init_seed(cfg.seed, &format!("dropout{epoch}.{b}"));
            let r = run_batch(model, &items, cfg.shards, true, seed, true)?;
            if !r.loss.is_finite() || r.grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite { epoch, batch: b, ids: items.iter().map(|it| it.id.clone()).collect() });
            }
            if r.labels > 0 {
                opt.update(&mut model.params, &r.grads, lr);
            }
            loss_sum += r.loss * r.labels as f64;
            labels += r.labels;
            preds.extend(r.predictions);
            targets.extend(items.iter().map(|it| it.targets.clone()));
        }
        let train_loss = if labels > 0 { loss_sum / labels as f64 } else { f64::NAN };
        let train_metric = score(metric, &preds, &targets).map_or(f64::NAN, |r| r.score);
        let mut rows = vec![LogRow {
            epoch,
            split: "train".into(),
            loss: train_loss,
            metric: train_metric,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        }];
        let mut monitored = train_loss;
        if !valid.is_empty() {
            let (vp, vloss) = predict_all(model, valid, cfg.batch_size)?;
            let vt: Vec<Vec<Option<f64>>> = valid.iter().map(|it| it.targets.clone()).collect();
            rows.push(LogRow {
                epoch,
                split: "valid".into(),
                loss: vloss,
                metric: score(metric, &vp, &vt).map_or(f64::NAN, |r| r.score),
                lr,
                seconds: start.elapsed().as_secs_f64(),
            });
            monitored = vloss;
        }
        if monitored < best.1 {
            best = (epoch, monitored, model.params.clone());
        }
        if cfg.scheduler == SchedulerKind::Rop {
            lr = rop.step(monitored, lr);
        }
        on_epoch(&rows);
        log.extend(rows);
    }
    model.params = best.2.clone();
    Ok(FitOutcome { log, best_epoch: best.0, best_loss: best.1, best_params: best.2 })
}

/// Prepares every record in parallel; records whose decomposition or
/// encoding fails are skipped and reported.
pub fn prepare_corpus(corpus: &Corpus, config: &ModelConfig) -> (Vec<Prepared>, Vec<Option<SplitTag>>, Vec<Skipped>) {
    let results: Vec<_> = corpus.records.par_iter().map(|r| prepare_record(r, config, &corpus.vocab)).collect();
    let mut prepared = Vec::new();
    let mut tags = Vec::new();
    let mut skipped = Vec::new();
    for (i, (r, res)) in corpus.records.iter().zip(results).enumerate() {
        match res {
            Ok(p) => {
                prepared.push(p);
                tags.push(r.split);
            }
            Err(e) => {
                log::warn!("skipping record {}: {e}", r.id);
                skipped.push(Skipped { line: i + 2, id: r.id.clone(), reason: e.to_string() });
            }
        }
    }
    (prepared, tags, skipped)
}

#[derive(Debug)]
pub struct TrainRun {
    pub model: SubFormer,
    pub outcome: FitOutcome,
    pub splits: Splits,
    pub prepared: Vec<Prepared>,
    pub skipped: Vec<Skipped>,
}

/// Full pipeline: prepare, split, build the model, initialize the head bias,
/// and fit.
pub fn train_corpus(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    on_epoch: impl FnMut(&[LogRow]),
) -> Result<TrainRun> {
    train_cfg.validate().map_err(TrainError::Config)?;
    let (prepared, tags, skipped) = prepare_corpus(corpus, model_cfg);
    let splits = match train_cfg.split {
        SplitKind::Random => split_dataset(prepared.len(), train_cfg.split_ratios, train_cfg.seed)?,
        SplitKind::Provided => {
            let ids: Vec<(String, Option<SplitTag>)> = prepared.iter().map(|p| p.id.clone()).zip(tags).collect();
            provided_split(&ids)?
        }
    };
    let mut model = SubFormer::new(
        model_cfg.clone(),
        corpus.header.tasks,
        corpus.header.task_type,
        corpus.vocab.clone(),
        train_cfg.seed,
    )?;
    let train: Vec<&Prepared> = splits.train.iter().map(|&i| &prepared[i]).collect();
    let valid: Vec<&Prepared> = splits.valid.iter().map(|&i| &prepared[i]).collect();
    init_head_bias(&mut model, &train);
    let outcome = fit(&mut model, &train, &valid, train_cfg, on_epoch)?;
    Ok(TrainRun { model, outcome, splits, prepared, skipped })
}
