//! Binary classification metrics: exact ROC-AUC, recall, and F1-optimal
//! threshold selection over the precision-recall sweep.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scored set is empty")]
    Empty,
    #[error("metric needs both classes; got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
}

/// Per-anchor predicted probabilities with ground-truth labels.
#[derive(Debug, Clone)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self, EvalError> {
        if scores.is_empty() || scores.len() != labels.len() {
            return Err(EvalError::Empty);
        }
        if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(EvalError::NonFiniteScore(bad));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    fn require_both_classes(&self) -> Result<(), EvalError> {
        let p = self.positives();
        if p == 0 || p == self.len() {
            return Err(EvalError::SingleClass {
                positives: p,
                negatives: self.len() - p,
            });
        }
        Ok(())
    }
}

/// Exact ROC-AUC by the rank statistic: the probability that a random
/// positive outranks a random negative, ties counting one half.
pub fn roc_auc(s: &ScoredSet) -> Result<f64, EvalError> {
    s.require_both_classes()?;
    let n = s.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s.scores[a].partial_cmp(&s.scores[b]).unwrap());

    // mid-ranks for tied scores
    let mut rank = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            rank[idx] = mid;
        }
        i = j + 1;
    }

    let pos = s.positives() as f64;
    let neg = s.negatives() as f64;
    let rank_sum: f64 = (0..n).filter(|&i| s.labels[i]).map(|i| rank[i]).sum();
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// Point picked by the threshold sweep.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ThresholdReport {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Sweep every distinct score as a threshold (`predict positive when
/// score >= threshold`) and return the F1 maximizer; ties pick the lower
/// threshold.
pub fn pr_threshold(s: &ScoredSet) -> Result<ThresholdReport, EvalError> {
    s.require_both_classes()?;
    let mut thresholds: Vec<f64> = s.scores.to_vec();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let mut best: Option<ThresholdReport> = None;
    for &t in &thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fnc = 0usize;
        for (&score, &label) in s.scores.iter().zip(&s.labels) {
            match (score >= t, label) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnc += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = tp as f64 / (tp + fnc) as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let candidate = ThresholdReport {
            threshold: t,
            precision,
            recall,
            f1,
        };
        // strict improvement keeps the lowest threshold on ties
        if best.map_or(true, |b| f1 > b.f1) {
            best = Some(candidate);
        }
    }
    Ok(best.expect("non-empty threshold sweep"))
}

/// Recall `TP / (TP + FN)` classifying `score >= threshold` as positive.
pub fn recall_at(s: &ScoredSet, threshold: f64) -> Result<f64, EvalError> {
    let pos = s.positives();
    if pos == 0 {
        return Err(EvalError::SingleClass {
            positives: 0,
            negatives: s.negatives(),
        });
    }
    let tp = s
        .scores
        .iter()
        .zip(&s.labels)
        .filter(|&(&score, &label)| label && score >= threshold)
        .count();
    Ok(tp as f64 / pos as f64)
}
