//! Threshold-free classification metrics: ROC AUC and precision-recall AUC.

use crate::error::{Error, Result};

/// Scores paired with binary labels.
#[derive(Debug, Clone)]
pub struct ScoredLabels {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::contract("ScoredLabels", "scores and labels differ in length"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::contract("ScoredLabels", format!("label {} outside {{0,1}}", bad)));
        }
        Ok(ScoredLabels { scores, labels })
    }

    fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// ROC AUC via the Mann-Whitney statistic: the fraction of (positive,
/// negative) pairs ranked correctly, ties counting one half.
///
/// Sorting by score gives O(n log n); the rank-sum over positives equals the
/// pairwise count, with midranks handling tied scores exactly.
pub fn roc_auc(data: &ScoredLabels) -> Result<f64> {
    let n_pos = data.positives();
    let n_neg = data.labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "roc_auc needs both classes, got {} positives / {} negatives",
            n_pos, n_neg
        )));
    }
    let mut order: Vec<usize> = (0..data.scores.len()).collect();
    order.sort_by(|&a, &b| data.scores[a].total_cmp(&data.scores[b]));

    // Midrank assignment over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && data.scores[order[j]] == data.scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j share the midrank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &ix in &order[i..j] {
            if data.labels[ix] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Precision-recall AUC as average precision with grouped ties: items are
/// taken in descending score order, all equally-scored items entering the
/// prefix together, and each group contributes delta-recall times the
/// precision at the group boundary.
pub fn pr_auc(data: &ScoredLabels) -> Result<f64> {
    let n_pos = data.positives();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("pr_auc needs at least one positive".to_string()));
    }
    let mut order: Vec<usize> = (0..data.scores.len()).collect();
    order.sort_by(|&a, &b| data.scores[b].total_cmp(&data.scores[a]));

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_tp = 0usize;
        while j < order.len() && data.scores[order[j]] == data.scores[order[i]] {
            if data.labels[order[j]] == 1 {
                group_tp += 1;
            }
            j += 1;
        }
        let prev_tp = tp;
        tp += group_tp;
        let precision = tp as f64 / j as f64;
        let delta_recall = (tp - prev_tp) as f64 / n_pos as f64;
        ap += delta_recall * precision;
        i = j;
    }
    Ok(ap)
}
