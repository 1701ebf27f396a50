//! Ranking and thresholded metrics.

use crate::error::{Error, Result};

/// Summary of one evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub auc: f64,
    pub accuracy: f64,
    pub loss: f64,
    pub count: usize,
}

/// Area under the ROC curve as the Mann–Whitney statistic, with ties
/// counted half via average ranks.
pub fn auc(labels: &[f64], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum_pos += avg * order[i..j].iter().filter(|&&k| labels[k] > 0.5).count() as f64;
        i = j;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Fraction of positions where `score >= threshold` agrees with the label.
/// Empty input gives NaN.
pub fn accuracy(labels: &[f64], scores: &[f64], threshold: f64) -> f64 {
    let hits = labels
        .iter()
        .zip(scores)
        .filter(|(y, s)| (**s >= threshold) == (**y > 0.5))
        .count();
    hits as f64 / labels.len() as f64
}
