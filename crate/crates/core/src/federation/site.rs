use std::borrow::Cow;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;

use super::{batch_size_for, CenterNode, HarmonizationNode, Prediction, Result, RoundContext};
use crate::aggregation::CenterUpdate;
use crate::augmentation::{augment, AugmentationTier};
use crate::harmonization::{match_histogram, region_bounds, rescale_unit, HistogramAggregate, ReferenceHistogram, Region};
use crate::model::{features, forward_features, loss_and_gradient_features, sgd_step, ModelSpec, ParameterVector};
use crate::phantom::{induce_prior, Prior, Volume};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Validation,
    Test,
}

/// Counts augmentation calls by the partition of the sample they touched.
#[derive(Debug, Default)]
pub struct AugmentAudit {
    train: AtomicUsize,
    validation: AtomicUsize,
    test: AtomicUsize,
}

impl AugmentAudit {
    fn note(&self, p: Partition) {
        let slot = match p {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        };
        slot.fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self, p: Partition) -> usize {
        match p {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
        .load(Ordering::Relaxed)
    }
}

pub(super) struct Sample {
    center_id: String,
    subject_id: String,
    key: String,
    label: u8,
    partition: Partition,
    prior: Prior,
    volume: Volume,
    /// Model features of the un-augmented prior input.
    features: Vec<f64>,
}

impl Sample {
    fn new(volume: Volume, partition: Partition, prior: Prior, model: &ModelSpec) -> Result<Self> {
        let features = features(model, &induce_prior(&volume, prior))?;
        Ok(Self {
            center_id: volume.center_id.clone(),
            subject_id: volume.subject_id.clone(),
            key: volume.sample_key(),
            label: volume.label.as_u8(),
            partition,
            prior,
            volume,
            features,
        })
    }

    /// Feature row for the `use_index`-th visit of this sample in `ctx.round`.
    fn training_row(&self, ctx: &RoundContext<'_>, use_index: usize, audit: &AugmentAudit) -> Result<Cow<'_, [f64]>> {
        if ctx.augmentation.tier == AugmentationTier::None {
            return Ok(Cow::Borrowed(&self.features));
        }
        audit.note(self.partition);
        let mut rng = seeding::stream(
            ctx.seed,
            &["augment", &self.center_id, &self.key, &ctx.round.to_string(), &use_index.to_string()],
        );
        let input = induce_prior(&self.volume, self.prior);
        let out = augment(&input, &self.volume.mask, ctx.augmentation, &mut rng);
        if out.sample.is_none() {
            return Ok(Cow::Borrowed(&self.features));
        }
        Ok(Cow::Owned(features(ctx.model, &out.input)?))
    }
}

/// `steps` SGD steps over a seeded shuffle of `samples`, cycling through the
/// order so every batch is full. Returns the new params and mean batch loss.
pub(super) fn train_pass(
    samples: &[(&Sample, &AugmentAudit)],
    start: &ParameterVector,
    ctx: &RoundContext<'_>,
    shuffle_key: &str,
    steps: usize,
    batch: usize,
) -> Result<(ParameterVector, f64)> {
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::stream(ctx.seed, &["shuffle", shuffle_key, &ctx.round.to_string()]));
    let mut params = start.clone();
    let mut loss_sum = 0.0;
    let mut rows = Vec::with_capacity(batch);
    let mut labels = Vec::with_capacity(batch);
    for step in 0..steps {
        rows.clear();
        labels.clear();
        for j in 0..batch {
            let pos = step * batch + j;
            let (sample, audit) = samples[order[pos % n]];
            rows.push(sample.training_row(ctx, pos / n, audit)?);
            labels.push(sample.label);
        }
        let (loss, grad) = loss_and_gradient_features(ctx.model, &params, &rows, &labels)?;
        params = sgd_step(&params, &grad, ctx.trainer.learning_rate)?;
        loss_sum += loss;
    }
    Ok((params, loss_sum / steps as f64))
}

pub(super) fn pooled_train<'a>(sites: &[&'a Site]) -> Vec<(&'a Sample, &'a AugmentAudit)> {
    sites
        .iter()
        .flat_map(|s| s.train.iter().map(move |x| (x, &s.audit)))
        .collect()
}

/// Harmonized, prior-ready data of one center for one fold.
pub struct Site {
    center_id: String,
    train: Vec<Sample>,
    validation: Vec<Sample>,
    test: Vec<Sample>,
    audit: AugmentAudit,
}

impl Site {
    /// Volumes are used as given; see [`RawSite::harmonize`] for the
    /// reference-matched path.
    pub fn new(
        center_id: impl Into<String>,
        prior: Prior,
        model: &ModelSpec,
        train: Vec<Volume>,
        validation: Vec<Volume>,
        test: Vec<Volume>,
    ) -> Result<Self> {
        let wrap = |vs: Vec<Volume>, p: Partition| {
            vs.into_iter().map(|v| Sample::new(v, p, prior, model)).collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            center_id: center_id.into(),
            train: wrap(train, Partition::Train)?,
            validation: wrap(validation, Partition::Validation)?,
            test: wrap(test, Partition::Test)?,
            audit: AugmentAudit::default(),
        })
    }

    pub fn audit(&self) -> &AugmentAudit {
        &self.audit
    }

    pub fn partition_sizes(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }

    fn scores(&self, samples: &[Sample], model: &ModelSpec, params: &ParameterVector) -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
        Ok(forward_features(model, params, &rows)?)
    }
}

impl CenterNode for Site {
    fn center_id(&self) -> &str {
        &self.center_id
    }

    fn train_sample_count(&self) -> usize {
        self.train.len()
    }

    fn local_round(&self, global: &ParameterVector, ctx: &RoundContext<'_>) -> Result<CenterUpdate> {
        let n = self.train.len();
        if n == 0 {
            return Err(super::FederationError::EmptyCenter(self.center_id.clone()));
        }
        let samples: Vec<_> = self.train.iter().map(|s| (s, &self.audit)).collect();
        let steps = ctx.trainer.iterations_per_round;
        let (params, loss) = train_pass(&samples, global, ctx, &self.center_id, steps, batch_size_for(n, steps))?;
        Ok(CenterUpdate {
            center_id: self.center_id.clone(),
            params,
            sample_count: n,
            train_loss: loss,
        })
    }

    fn validation_scores(&self, model: &ModelSpec, params: &ParameterVector) -> Result<Vec<(f64, u8)>> {
        let scores = self.scores(&self.validation, model, params)?;
        Ok(scores.into_iter().zip(self.validation.iter().map(|s| s.label)).collect())
    }

    fn test_predictions(&self, model: &ModelSpec, params: &ParameterVector) -> Result<Vec<Prediction>> {
        let scores = self.scores(&self.test, model, params)?;
        Ok(self
            .test
            .iter()
            .zip(scores)
            .map(|(s, score)| Prediction {
                center_id: s.center_id.clone(),
                subject_id: s.subject_id.clone(),
                sample_key: s.key.clone(),
                score,
                label: s.label,
            })
            .collect())
    }
}

/// Cropped but not yet harmonized volumes of one center, split for a fold.
#[derive(Debug, Clone)]
pub struct RawSite {
    pub center_id: String,
    pub train: Vec<Volume>,
    pub validation: Vec<Volume>,
    pub test: Vec<Volume>,
}

impl RawSite {
    fn reference_pool(&self) -> impl Iterator<Item = &Volume> {
        self.train.iter().chain(&self.validation)
    }

    /// Matches every volume to `reference` (if given), rescales it to
    /// `[0, 1]`, and wraps the result as a trainable [`Site`].
    pub fn harmonize(
        &self,
        reference: Option<&ReferenceHistogram>,
        region: Region,
        prior: Prior,
        model: &ModelSpec,
    ) -> Result<Site> {
        let prep = |vs: &[Volume]| {
            vs.iter()
                .map(|v| {
                    let matched = match reference {
                        Some(r) => match_histogram(v, r, region)?,
                        None => v.clone(),
                    };
                    Ok(rescale_unit(&matched, region)?)
                })
                .collect::<Result<Vec<_>>>()
        };
        Site::new(
            self.center_id.clone(),
            prior,
            model,
            prep(&self.train)?,
            prep(&self.validation)?,
            prep(&self.test)?,
        )
    }
}

impl HarmonizationNode for RawSite {
    fn center_id(&self) -> &str {
        &self.center_id
    }

    fn intensity_bounds(&self, region: Region) -> Option<(f64, f64)> {
        self.reference_pool()
            .filter_map(|v| region_bounds(v, region))
            .reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)))
    }

    fn histogram_aggregate(&self, region: Region, edges: &[f64]) -> Result<Option<HistogramAggregate>> {
        if self.train.is_empty() && self.validation.is_empty() {
            return Ok(None);
        }
        Ok(Some(HistogramAggregate::from_volumes(
            self.center_id.clone(),
            self.reference_pool(),
            region,
            edges,
        )?))
    }
}
