//! Evaluation metrics: accuracy at a fixed threshold and AUC computed two
//! independent ways (rank statistic and trapezoidal ROC integral) that must
//! agree to 1e-9.

use crate::error::{Error, Result};

/// Fraction of samples classified correctly with fake iff score ≥ 0.5.
pub fn accuracy(scores: &[(f64, u8)]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let correct = scores
        .iter()
        .filter(|&&(s, y)| (s >= 0.5) == (y == 1))
        .count();
    correct as f64 / scores.len() as f64
}

/// AUC as the Mann–Whitney statistic: the probability that a fake scores
/// above a real, ties counted one half. Computed via average ranks.
pub fn auc(scores_real: &[f64], scores_fake: &[f64]) -> Result<f64> {
    if scores_real.is_empty() || scores_fake.is_empty() {
        return Err(Error::InvalidInput {
            op: "auc",
            detail: "both classes must be nonempty".into(),
        });
    }
    let n_r = scores_real.len();
    let n_f = scores_fake.len();
    let mut all: Vec<(f64, bool)> = scores_real
        .iter()
        .map(|&s| (s, false))
        .chain(scores_fake.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores must not be NaN"));

    // Average ranks over tie groups, 1-based.
    let mut rank_sum_fake = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = ((i + 1 + j) as f64) / 2.0; // mean of ranks i+1 ..= j
        for item in &all[i..j] {
            if item.1 {
                rank_sum_fake += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_fake - (n_f * (n_f + 1)) as f64 / 2.0;
    Ok(u / (n_f as f64 * n_r as f64))
}

/// AUC as the trapezoidal integral of the ROC curve, sweeping thresholds
/// over the distinct scores in descending order. Independent of `auc`.
pub fn auc_trapezoid(scores_real: &[f64], scores_fake: &[f64]) -> Result<f64> {
    if scores_real.is_empty() || scores_fake.is_empty() {
        return Err(Error::InvalidInput {
            op: "auc_trapezoid",
            detail: "both classes must be nonempty".into(),
        });
    }
    let mut thresholds: Vec<f64> = scores_real
        .iter()
        .chain(scores_fake.iter())
        .copied()
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).expect("scores must not be NaN"));
    thresholds.dedup();

    let n_r = scores_real.len() as f64;
    let n_f = scores_fake.len() as f64;
    let mut area = 0.0f64;
    let mut prev_tpr = 0.0f64;
    let mut prev_fpr = 0.0f64;
    for &t in &thresholds {
        let tpr = scores_fake.iter().filter(|&&s| s >= t).count() as f64 / n_f;
        let fpr = scores_real.iter().filter(|&&s| s >= t).count() as f64 / n_r;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    area += (1.0 - prev_fpr) * (1.0 + prev_tpr) / 2.0;
    Ok(area)
}
