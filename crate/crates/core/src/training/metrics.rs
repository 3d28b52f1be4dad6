use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "mae")]
    Mae,
    #[serde(rename = "roc-auc")]
    RocAuc,
    #[serde(rename = "ap")]
    Ap,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Mae => "mae",
            Metric::RocAuc => "roc-auc",
            Metric::Ap => "ap",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        match s {
            "mae" => Some(Metric::Mae),
            "roc-auc" | "rocauc" | "auc" => Some(Metric::RocAuc),
            "ap" => Some(Metric::Ap),
            _ => None,
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != Metric::Mae
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub score: f64,
    /// Per-task score; `None` for tasks left out of the average.
    pub per_task: Vec<Option<f64>>,
    /// Tasks with a single class among their labels.
    pub excluded: Vec<usize>,
}

/// Mean absolute error over all present labels.
pub fn mae(preds: &[Vec<f64>], targets: &[Vec<Option<f64>>]) -> Option<f64> {
    let (sum, count) = preds
        .iter()
        .zip(targets)
        .flat_map(|(p, t)| p.iter().zip(t))
        .filter_map(|(p, t)| t.map(|t| (p - t).abs()))
        .fold((0.0, 0usize), |(s, c), e| (s + e, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Sorted by score with ties kept adjacent; returns index groups of equal scores.
fn tie_groups(scores: &[f64], descending: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let o = scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal);
        if descending { o.reverse() } else { o }
    });
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Mann-Whitney rank statistic with average ranks for ties. `None` when only
/// one class is present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut rank_sum = 0.0;
    let mut next_rank = 1.0;
    for g in tie_groups(scores, false) {
        let avg = next_rank + (g.len() as f64 - 1.0) / 2.0;
        rank_sum += avg * g.iter().filter(|&&i| labels[i]).count() as f64;
        next_rank += g.len() as f64;
    }
    let p = pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Area under the precision-recall curve with step interpolation:
/// `sum (R_k - R_{k-1}) P_k` over descending score thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return None;
    }
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for g in tie_groups(scores, true) {
        let hits = g.iter().filter(|&&i| labels[i]).count();
        tp += hits;
        seen += g.len();
        ap += (hits as f64 / pos as f64) * (tp as f64 / seen as f64);
    }
    Some(ap)
}

/// Scores predictions against targets, averaging classification metrics over
/// tasks that have both classes.
pub fn score(metric: Metric, preds: &[Vec<f64>], targets: &[Vec<Option<f64>>]) -> Result<MetricReport, TrainError> {
    if preds.len() != targets.len() {
        return Err(TrainError::Metric(format!("{} predictions for {} records", preds.len(), targets.len())));
    }
    let tasks = targets.first().map_or(0, Vec::len);
    if metric == Metric::Mae {
        let per_task: Vec<Option<f64>> = (0..tasks)
            .map(|k| {
                let p: Vec<Vec<f64>> = preds.iter().map(|p| vec![p[k]]).collect();
                let t: Vec<Vec<Option<f64>>> = targets.iter().map(|t| vec![t[k]]).collect();
                mae(&p, &t)
            })
            .collect();
        let score = mae(preds, targets).ok_or_else(|| TrainError::Metric("no labels to score".into()))?;
        return Ok(MetricReport { metric, score, per_task, excluded: vec![] });
    }
    let mut per_task = Vec::with_capacity(tasks);
    let mut excluded = Vec::new();
    for k in 0..tasks {
        let (s, l): (Vec<f64>, Vec<bool>) = preds
            .iter()
            .zip(targets)
            .filter_map(|(p, t)| t[k].map(|t| (p[k], t > 0.5)))
            .unzip();
        let v = match metric {
            Metric::RocAuc => roc_auc(&s, &l),
            _ => average_precision(&s, &l),
        };
        if v.is_none() {
            log::warn!("task {k} has a single class; excluded from {}", metric.name());
            excluded.push(k);
        }
        per_task.push(v);
    }
    let valid: Vec<f64> = per_task.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(TrainError::Metric(format!("no task has both classes for {}", metric.name())));
    }
    Ok(MetricReport { metric, score: valid.iter().sum::<f64>() / valid.len() as f64, per_task, excluded })
}
