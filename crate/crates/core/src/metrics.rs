//! Detection metrics: ROC AUC, thresholded accuracy, and relative error reduction.

use crate::error::{E3Error, Result};

/// Mann–Whitney AUC: `(#{p > n} + ½·#{p = n}) / (|pos|·|neg|)`, computed from
/// average ranks in `O(n log n)`.
pub fn roc_auc(pos: &[f32], neg: &[f32]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(E3Error::Data(format!(
            "AUC needs both classes ({} positive, {} negative scores)",
            pos.len(),
            neg.len()
        )));
    }
    if pos.iter().chain(neg).any(|s| s.is_nan()) {
        return Err(E3Error::Data("AUC scores contain NaN".into()));
    }
    let mut all: Vec<(f32, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Ranks are 1-based; a tie group spanning ranks i+1..=j shares rank (i+1+j)/2.
    // Doubling keeps the sum integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let twice_rank = (i + 1 + j) as u64;
        let pos_in_group = all[i..j].iter().filter(|e| e.1).count() as u64;
        twice_rank_sum += twice_rank * pos_in_group;
        i = j;
    }
    let (np, nn) = (pos.len() as u64, neg.len() as u64);
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2 * np * nn) as f64)
}

/// Fraction of samples where `(score ≥ threshold)` matches the label.
pub fn accuracy(scores: &[f32], labels: &[bool], threshold: f32) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(E3Error::Contract(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(E3Error::Data("accuracy of an empty set".into()));
    }
    let hits = scores.iter().zip(labels).filter(|(s, l)| (**s >= threshold) == **l).count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Relative error reduction in percent: `100·(auc_new − auc_ref)/(1 − auc_ref)`.
pub fn rer(auc_new: f64, auc_ref: f64) -> Result<f64> {
    if auc_ref >= 1.0 {
        return Err(E3Error::Undefined(format!("RER with reference AUC {auc_ref}")));
    }
    Ok(100.0 * (auc_new - auc_ref) / (1.0 - auc_ref))
}
