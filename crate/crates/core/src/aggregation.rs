//! Server-side model combination.
//!
//! Updates are always summed in ascending `center_id` order so that a run is
//! bit-reproducible regardless of the order in which centers finished.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LayoutId, ParameterVector};

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("no updates to aggregate")]
    Empty,
    #[error("update from {center} has layout {found} with {found_len} values, expected {expected} with {expected_len}")]
    LayoutMismatch {
        center: String,
        expected: LayoutId,
        expected_len: usize,
        found: LayoutId,
        found_len: usize,
    },
    #[error("total sample count is zero")]
    ZeroSampleCount,
    #[error("center {0} submitted more than one update")]
    DuplicateCenter(String),
    #[error("fixed weight scheme has no usable weight for center {0}")]
    MissingFixedWeight(String),
    #[error("aggregate produced a non-finite value")]
    NonFinite,
}

/// One center's locally trained model, as seen by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterUpdate {
    pub center_id: String,
    pub params: ParameterVector,
    /// `n_k`, the number of training samples behind `params`.
    pub sample_count: usize,
    /// Mean training loss over the local round.
    pub train_loss: f64,
}

impl CenterUpdate {
    pub fn new(center_id: impl Into<String>, params: ParameterVector, sample_count: usize) -> Self {
        Self {
            center_id: center_id.into(),
            params,
            sample_count,
            train_loss: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WeightScheme {
    /// FederatedAveraging: center `k` weighs `n_k / n`.
    SampleProportional,
    /// FL-EV: every center weighs `1 / K`.
    EqualVote,
    /// Caller-supplied nonnegative votes per center id, normalized over the
    /// centers present in a round.
    Fixed(BTreeMap<String, f64>),
}

fn canonical_order(updates: &[CenterUpdate]) -> Result<Vec<&CenterUpdate>, AggregationError> {
    let first = updates.first().ok_or(AggregationError::Empty)?;
    let mut sorted: Vec<&CenterUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.center_id.cmp(&b.center_id));
    for pair in sorted.windows(2) {
        if pair[0].center_id == pair[1].center_id {
            return Err(AggregationError::DuplicateCenter(pair[0].center_id.clone()));
        }
    }
    for u in &sorted {
        if u.params.layout() != first.params.layout() || u.params.len() != first.params.len() {
            return Err(AggregationError::LayoutMismatch {
                center: u.center_id.clone(),
                expected: first.params.layout(),
                expected_len: first.params.len(),
                found: u.params.layout(),
                found_len: u.params.len(),
            });
        }
    }
    Ok(sorted)
}

fn weights_for(sorted: &[&CenterUpdate], scheme: &WeightScheme) -> Result<Vec<f64>, AggregationError> {
    match scheme {
        WeightScheme::SampleProportional => {
            let total: usize = sorted.iter().map(|u| u.sample_count).sum();
            if total == 0 {
                return Err(AggregationError::ZeroSampleCount);
            }
            let n = total as f64;
            Ok(sorted.iter().map(|u| u.sample_count as f64 / n).collect())
        }
        WeightScheme::EqualVote => {
            let k = sorted.len() as f64;
            Ok(vec![1.0 / k; sorted.len()])
        }
        WeightScheme::Fixed(votes) => {
            let raw = sorted
                .iter()
                .map(|u| match votes.get(&u.center_id) {
                    Some(&v) if v >= 0.0 && v.is_finite() => Ok(v),
                    _ => Err(AggregationError::MissingFixedWeight(u.center_id.clone())),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let total: f64 = raw.iter().sum();
            if total <= 0.0 {
                return Err(AggregationError::ZeroSampleCount);
            }
            Ok(raw.iter().map(|v| v / total).collect())
        }
    }
}

/// Per-center weights in canonical (ascending id) order.
pub fn effective_weights(
    updates: &[CenterUpdate],
    scheme: &WeightScheme,
) -> Result<Vec<(String, f64)>, AggregationError> {
    let sorted = canonical_order(updates)?;
    if sorted.len() == 1 {
        return Ok(vec![(sorted[0].center_id.clone(), 1.0)]);
    }
    let w = weights_for(&sorted, scheme)?;
    Ok(sorted
        .iter()
        .zip(w)
        .map(|(u, w)| (u.center_id.clone(), w))
        .collect())
}

/// Weighted combination of center models. A single update is returned as is.
pub fn aggregate(
    updates: &[CenterUpdate],
    scheme: &WeightScheme,
) -> Result<ParameterVector, AggregationError> {
    let sorted = canonical_order(updates)?;
    if sorted.len() == 1 {
        return Ok(sorted[0].params.clone());
    }
    let weights = weights_for(&sorted, scheme)?;
    let len = sorted[0].params.len();
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        // Neumaier-compensated sum of w_k * v_k[i].
        let mut sum = 0.0f64;
        let mut carry = 0.0f64;
        for (u, &w) in sorted.iter().zip(&weights) {
            let term = w * u.params.values()[i];
            let t = sum + term;
            if sum.abs() >= term.abs() {
                carry += (sum - t) + term;
            } else {
                carry += (term - t) + sum;
            }
            sum = t;
        }
        out.push(sum + carry);
    }
    ParameterVector::new(out, sorted[0].params.layout()).map_err(|_| AggregationError::NonFinite)
}
