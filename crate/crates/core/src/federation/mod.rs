//! Training orchestration: pooled (CDS) training and federated rounds with an
//! aggregation barrier, both with validation-AUC early stopping.
//!
//! The orchestrator only talks to centers through [`CenterNode`] and
//! [`HarmonizationNode`]. Neither trait hands out volumes, features or
//! anything else at the subject level besides per-sample scores.

mod site;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::aggregation::{aggregate, AggregationError, CenterUpdate, WeightScheme};
use crate::augmentation::AugmentationPolicy;
use crate::evaluation::{auc, AucError};
use crate::harmonization::{
    average_histogram, uniform_edges, HarmonizationError, HistogramAggregate, ReferenceHistogram, Region,
};
use crate::model::{init_parameters, ModelError, ModelSpec, ParameterVector, TrainerConfig};
use crate::phantom::PhantomError;
use crate::seeding;

pub use site::{AugmentAudit, Partition, RawSite, Site};

/// Improvements smaller than this do not reset the patience counter.
pub const IMPROVEMENT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("a federation needs at least one center")]
    NoCenters,
    #[error("duplicate center id {0}")]
    DuplicateCenter(String),
    #[error("center {0} has no training samples")]
    EmptyCenter(String),
    #[error("no validation samples across the federation")]
    NoValidation,
    #[error("pooled validation set has a single class")]
    SingleClassValidation,
    #[error("no center contributed to the harmonization reference")]
    NoReferenceContributors,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Harmonization(#[from] HarmonizationError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Auc(#[from] AucError),
}

pub type Result<T> = std::result::Result<T, FederationError>;

/// `⌈center_size / iterations⌉`.
pub fn batch_size_for(center_size: usize, iterations: usize) -> usize {
    assert!(center_size >= 1 && iterations >= 1, "batch_size_for needs positive arguments");
    center_size.div_ceil(iterations)
}

/// Everything a center needs to run one local round.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub model: &'a ModelSpec,
    pub trainer: &'a TrainerConfig,
    pub augmentation: &'a AugmentationPolicy,
    /// Experiment seed; all center-side randomness derives from it.
    pub seed: u64,
    pub round: usize,
}

/// A test-set prediction. Identifiers plus one score, no image content.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub center_id: String,
    pub subject_id: String,
    pub sample_key: String,
    pub score: f64,
    pub label: u8,
}

/// The orchestrator's view of a training center.
pub trait CenterNode: Sync {
    fn center_id(&self) -> &str;
    fn train_sample_count(&self) -> usize;
    fn local_round(&self, global: &ParameterVector, ctx: &RoundContext<'_>) -> Result<CenterUpdate>;
    /// `(score, label)` per validation sample under `params`.
    fn validation_scores(&self, model: &ModelSpec, params: &ParameterVector) -> Result<Vec<(f64, u8)>>;
    fn test_predictions(&self, model: &ModelSpec, params: &ParameterVector) -> Result<Vec<Prediction>>;
}

/// The harmonization-phase view of a center: scalar bounds and a summed
/// histogram over its non-test samples.
pub trait HarmonizationNode: Sync {
    fn center_id(&self) -> &str;
    fn intensity_bounds(&self, region: Region) -> Option<(f64, f64)>;
    /// `None` when the center has no samples that may contribute.
    fn histogram_aggregate(&self, region: Region, edges: &[f64]) -> Result<Option<HistogramAggregate>>;
}

/// Two-step reference build: agree on shared bin edges from the centers'
/// min/max, then average their histogram aggregates.
pub fn build_reference<H: HarmonizationNode>(
    nodes: &[H],
    region: Region,
    bins: usize,
) -> Result<ReferenceHistogram> {
    let bounds: Vec<(f64, f64)> = nodes.iter().filter_map(|n| n.intensity_bounds(region)).collect();
    if bounds.is_empty() {
        return Err(FederationError::NoReferenceContributors);
    }
    let lo = bounds.iter().map(|b| b.0).fold(f64::INFINITY, f64::min);
    let hi = bounds.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
    let edges = uniform_edges(lo, hi, bins)?;
    let aggregates = nodes
        .iter()
        .map(|n| n.histogram_aggregate(region, &edges))
        .collect::<Result<Vec<_>>>()?;
    let aggregates: Vec<HistogramAggregate> = aggregates.into_iter().flatten().collect();
    if aggregates.is_empty() {
        return Err(FederationError::NoReferenceContributors);
    }
    Ok(average_histogram(&aggregates)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSetup {
    pub model: ModelSpec,
    pub trainer: TrainerConfig,
    pub augmentation: AugmentationPolicy,
    /// Run centers of a round on the rayon pool.
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundLog {
    pub round_index: usize,
    #[serde(skip)]
    pub global_params: ParameterVector,
    pub per_center_train_loss: BTreeMap<String, f64>,
    pub validation_score: f64,
}

/// Resumable trainer state. Everything the next round depends on lives here.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub params: ParameterVector,
    pub best_params: ParameterVector,
    pub best_score: f64,
    pub best_round: Option<usize>,
    pub stale_rounds: usize,
    pub logs: Vec<RoundLog>,
    pub finished: bool,
}

impl TrainingState {
    pub fn initial(model: &ModelSpec, seed: u64) -> Self {
        let params = init_parameters(model, seeding::derive_seed(seed, &["init"]));
        Self {
            best_params: params.clone(),
            params,
            best_score: f64::NEG_INFINITY,
            best_round: None,
            stale_rounds: 0,
            logs: Vec::new(),
            finished: false,
        }
    }

    pub fn next_round(&self) -> usize {
        self.logs.len()
    }

    fn record(&mut self, trainer: &TrainerConfig, params: ParameterVector, losses: BTreeMap<String, f64>, score: f64) {
        let round = self.next_round();
        if score > self.best_score + IMPROVEMENT_TOLERANCE {
            self.best_score = score;
            self.best_params = params.clone();
            self.best_round = Some(round);
            self.stale_rounds = 0;
        } else {
            self.stale_rounds += 1;
        }
        self.logs.push(RoundLog {
            round_index: round,
            global_params: params.clone(),
            per_center_train_loss: losses,
            validation_score: score,
        });
        self.params = params;
        self.finished = self.stale_rounds >= trainer.patience || self.logs.len() >= trainer.max_epochs;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub best_params: ParameterVector,
    pub best_round: usize,
    pub best_score: f64,
    pub logs: Vec<RoundLog>,
}

impl TryFrom<TrainingState> for TrainingOutcome {
    type Error = FederationError;

    fn try_from(s: TrainingState) -> Result<Self> {
        let best_round = s.best_round.ok_or(FederationError::NoValidation)?;
        Ok(Self {
            best_params: s.best_params,
            best_round,
            best_score: s.best_score,
            logs: s.logs,
        })
    }
}

fn check_centers<C: CenterNode>(centers: &[C]) -> Result<Vec<&C>> {
    if centers.is_empty() {
        return Err(FederationError::NoCenters);
    }
    let mut sorted: Vec<&C> = centers.iter().collect();
    sorted.sort_by(|a, b| a.center_id().cmp(b.center_id()));
    for w in sorted.windows(2) {
        if w[0].center_id() == w[1].center_id() {
            return Err(FederationError::DuplicateCenter(w[0].center_id().to_string()));
        }
    }
    if let Some(c) = sorted.iter().find(|c| c.train_sample_count() == 0) {
        return Err(FederationError::EmptyCenter(c.center_id().to_string()));
    }
    Ok(sorted)
}

/// AUC of `params` on the validation samples of all centers, pooled.
pub fn pooled_validation_auc<C: CenterNode>(centers: &[&C], model: &ModelSpec, params: &ParameterVector) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for c in centers {
        for (s, l) in c.validation_scores(model, params)? {
            scores.push(s);
            labels.push(l);
        }
    }
    if scores.is_empty() {
        return Err(FederationError::NoValidation);
    }
    match auc(&scores, &labels) {
        Err(AucError::SingleClass { .. }) => Err(FederationError::SingleClassValidation),
        other => Ok(other?),
    }
}

/// Runs up to `max_rounds` more federated rounds from `state`.
pub fn advance_federated<C: CenterNode>(
    centers: &[C],
    scheme: &WeightScheme,
    setup: &TrainingSetup,
    seed: u64,
    mut state: TrainingState,
    max_rounds: usize,
) -> Result<TrainingState> {
    let sorted = check_centers(centers)?;
    for _ in 0..max_rounds {
        if state.finished {
            break;
        }
        let ctx = RoundContext {
            model: &setup.model,
            trainer: &setup.trainer,
            augmentation: &setup.augmentation,
            seed,
            round: state.next_round(),
        };
        let global = &state.params;
        let updates: Vec<CenterUpdate> = if setup.parallel {
            sorted.par_iter().map(|c| c.local_round(global, &ctx)).collect::<Result<_>>()?
        } else {
            sorted.iter().map(|c| c.local_round(global, &ctx)).collect::<Result<_>>()?
        };
        let next = aggregate(&updates, scheme)?;
        let losses = updates.iter().map(|u| (u.center_id.clone(), u.train_loss)).collect();
        let score = pooled_validation_auc(&sorted, &setup.model, &next)?;
        state.record(&setup.trainer, next, losses, score);
    }
    Ok(state)
}

/// Federated training to completion: identical initial model on every
/// center, local rounds, aggregation, pooled validation, early stopping.
pub fn run_federated<C: CenterNode>(
    centers: &[C],
    scheme: &WeightScheme,
    setup: &TrainingSetup,
    seed: u64,
) -> Result<TrainingOutcome> {
    setup.trainer.validate()?;
    setup.model.validate()?;
    let state = TrainingState::initial(&setup.model, seed);
    advance_federated(centers, scheme, setup, seed, state, usize::MAX)?.try_into()
}

/// Pooled-data rounds: one model trains on the union of all centers'
/// training samples with `K * iterations` steps per round.
pub fn advance_cds(
    centers: &[Site],
    setup: &TrainingSetup,
    seed: u64,
    mut state: TrainingState,
    max_rounds: usize,
) -> Result<TrainingState> {
    let sorted = check_centers(centers)?;
    let pooled_id = sorted.iter().map(|c| c.center_id()).collect::<Vec<_>>().join("+");
    let samples = site::pooled_train(&sorted);
    let steps = sorted.len() * setup.trainer.iterations_per_round;
    let batch = batch_size_for(samples.len(), steps);
    for _ in 0..max_rounds {
        if state.finished {
            break;
        }
        let ctx = RoundContext {
            model: &setup.model,
            trainer: &setup.trainer,
            augmentation: &setup.augmentation,
            seed,
            round: state.next_round(),
        };
        let (next, loss) = site::train_pass(&samples, &state.params, &ctx, &pooled_id, steps, batch)?;
        let losses = BTreeMap::from([(pooled_id.clone(), loss)]);
        let score = pooled_validation_auc(&sorted, &setup.model, &next)?;
        state.record(&setup.trainer, next, losses, score);
    }
    Ok(state)
}

pub fn run_cds(centers: &[Site], setup: &TrainingSetup, seed: u64) -> Result<TrainingOutcome> {
    setup.trainer.validate()?;
    setup.model.validate()?;
    let state = TrainingState::initial(&setup.model, seed);
    advance_cds(centers, setup, seed, state, usize::MAX)?.try_into()
}

/// Test predictions of `params` from every center, in center order.
pub fn collect_test_predictions<C: CenterNode>(
    centers: &[C],
    model: &ModelSpec,
    params: &ParameterVector,
) -> Result<Vec<Prediction>> {
    let mut sorted: Vec<&C> = centers.iter().collect();
    sorted.sort_by(|a, b| a.center_id().cmp(b.center_id()));
    let mut out = Vec::new();
    for c in sorted {
        out.extend(c.test_predictions(model, params)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes() {
        assert_eq!(batch_size_for(70, 7), 10);
        assert_eq!(batch_size_for(7, 7), 1);
        assert_eq!(batch_size_for(24, 7), 4);
        assert_eq!(batch_size_for(144, 28), 6);
    }

    #[test]
    fn early_stopping_counts_stale_rounds() {
        let model = ModelSpec::logistic([1, 2, 1, 1], 1);
        let trainer = TrainerConfig {
            patience: 1,
            ..TrainerConfig::default()
        };
        let mut s = TrainingState::initial(&model, 0);
        let p = s.params.clone();
        s.record(&trainer, p.clone(), BTreeMap::new(), 0.7);
        assert!(!s.finished);
        s.record(&trainer, p.clone(), BTreeMap::new(), 0.7);
        assert!(s.finished);
        assert_eq!(s.logs.len(), 2);
        assert_eq!(s.best_round, Some(0));
    }

    #[test]
    fn tiny_gains_do_not_count() {
        let model = ModelSpec::logistic([1, 2, 1, 1], 1);
        let trainer = TrainerConfig {
            patience: 3,
            ..TrainerConfig::default()
        };
        let mut s = TrainingState::initial(&model, 0);
        let p = s.params.clone();
        for score in [0.5, 0.5 + 1e-10, 0.6, 0.6] {
            s.record(&trainer, p.clone(), BTreeMap::new(), score);
        }
        assert_eq!(s.best_round, Some(2));
        assert_eq!(s.stale_rounds, 1);
    }
}
