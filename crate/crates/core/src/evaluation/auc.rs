//! ROC AUC via the Mann-Whitney U statistic with midranks for ties.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AucError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("AUC needs both classes; got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u8),
    #[error("score at index {0} is not finite")]
    NonFinite(usize),
}

/// `(concordant + 0.5 * tied) / (positives * negatives)` over all
/// positive/negative pairs, computed in `O(n log n)`.
///
/// The numerator is accumulated as an exact integer (twice the U statistic),
/// so the result equals the pairwise definition bit for bit.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, AucError> {
    if scores.len() != labels.len() {
        return Err(AucError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(AucError::InvalidLabel(bad));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(AucError::NonFinite(i));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(AucError::SingleClass { positives, negatives });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum over positives of twice their (1-based) midrank.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u128;
        // ranks start+1..=end, midrank = (start + 1 + end) / 2
        twice_rank_sum += pos_in_group * (start as u128 + 1 + end as u128);
        start = end;
    }
    let p = positives as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * negatives as u128) as f64)
}
