//! Binary classification metrics: rank-statistic AUC, accuracy, RMSE.

/// Area under the ROC curve via the rank statistic, ties counted half.
/// Returns `None` when only one class is present.
///
/// Equivalent to counting, over all (positive, negative) pairs, how often the
/// positive scores higher (ties worth 0.5) — the O(n log n) average-rank form
/// of that count.
pub fn auc(labels: &[u8], scores: &[f64]) -> Option<f64> {
    assert_eq!(labels.len(), scores.len());
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; a tie group spanning ranks i+1..=j+1 shares the
        // average rank.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    let u = rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0;
    Some(u / (n_pos_f * n_neg as f64))
}

/// Fraction of predictions on the correct side of 0.5 (score >= 0.5 reads
/// as class 1).
pub fn accuracy(labels: &[u8], scores: &[f64]) -> f64 {
    assert_eq!(labels.len(), scores.len());
    assert!(!labels.is_empty());
    let correct = labels
        .iter()
        .zip(scores)
        .filter(|(&l, &s)| (s >= 0.5) == (l == 1))
        .count();
    correct as f64 / labels.len() as f64
}

/// Complement of accuracy, defined as 1 - accuracy so the pair always sums
/// to exactly 1.
pub fn error_rate(labels: &[u8], scores: &[f64]) -> f64 {
    1.0 - accuracy(labels, scores)
}

pub fn rmse(labels: &[u8], scores: &[f64]) -> f64 {
    assert_eq!(labels.len(), scores.len());
    assert!(!labels.is_empty());
    let sum_sq: f64 = labels
        .iter()
        .zip(scores)
        .map(|(&l, &s)| {
            let e = f64::from(l) - s;
            e * e
        })
        .sum();
    (sum_sq / labels.len() as f64).sqrt()
}
