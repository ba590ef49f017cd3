use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::folds::{plan, CenterRoster, Fold, FoldError, FoldPlan, Scheme, SubjectRef};
use super::{auc, AucError};
use crate::aggregation::WeightScheme;
use crate::augmentation::{AugmentationPolicy, AugmentationTier};
use crate::federation::{
    batch_size_for, build_reference, collect_test_predictions, run_cds, run_federated, CenterNode, FederationError,
    Prediction, RawSite, RoundLog, Site, TrainingOutcome, TrainingSetup,
};
use crate::harmonization::Region;
use crate::model::{ModelError, ModelKind, ModelSpec, TrainerConfig};
use crate::phantom::io::encode_volume;
use crate::phantom::{crop, resample, CenterDataset, PhantomError, Prior, Subject};

pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Fold(#[from] FoldError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Auc(#[from] AucError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Framework {
    Cds,
    Fl,
    FlEv,
}

impl Framework {
    pub const ALL: [Framework; 3] = [Framework::Cds, Framework::Fl, Framework::FlEv];

    pub fn as_str(self) -> &'static str {
        match self {
            Framework::Cds => "cds",
            Framework::Fl => "fl",
            Framework::FlEv => "fl-ev",
        }
    }

    pub fn weight_scheme(self) -> Option<WeightScheme> {
        match self {
            Framework::Cds => None,
            Framework::Fl => Some(WeightScheme::SampleProportional),
            Framework::FlEv => Some(WeightScheme::EqualVote),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Common voxel spacing in mm every volume is resampled to.
    pub target_spacing: [f64; 3],
    /// Crop window in voxels, centred on the segmentation.
    pub window: [usize; 3],
    pub histogram_bins: usize,
    pub harmonize: bool,
    pub augmentation_probability: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_spacing: [2.5, 2.5, 10.0],
            window: [32, 32, 8],
            histogram_bins: 256,
            harmonize: true,
            augmentation_probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_width: usize,
    pub downsample_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Logistic,
            hidden_width: 0,
            downsample_factor: 4,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, window: [usize; 3]) -> ModelSpec {
        let shape = [INPUT_CHANNELS, window[0], window[1], window[2]];
        match self.kind {
            ModelKind::Logistic => ModelSpec::logistic(shape, self.downsample_factor),
            ModelKind::Mlp => ModelSpec::mlp(shape, self.hidden_width, self.downsample_factor),
        }
    }
}

/// The resolved experimental grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentPlan {
    pub frameworks: Vec<Framework>,
    pub schemes: Vec<Scheme>,
    pub priors: Vec<Prior>,
    pub tiers: Vec<AugmentationTier>,
    pub seeds: Vec<u64>,
    /// Seed of the fold planner; fixed across frameworks and model seeds.
    pub split_seed: u64,
    pub preprocess: PreprocessConfig,
    pub trainer: TrainerConfig,
    pub model: ModelConfig,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            frameworks: vec![Framework::Cds, Framework::Fl],
            schemes: vec![Scheme::Ccv],
            priors: vec![Prior::Masked],
            tiers: vec![AugmentationTier::None],
            seeds: vec![0, 1, 2, 3, 4],
            split_seed: 0,
            preprocess: PreprocessConfig::default(),
            trainer: TrainerConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

fn dedup<T: Ord + Clone>(v: &[T]) -> bool {
    v.iter().collect::<BTreeSet<_>>().len() == v.len()
}

impl ExperimentPlan {
    pub fn model_spec(&self) -> ModelSpec {
        self.model.spec(self.preprocess.window)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ExperimentError::Invalid(m.to_string()));
        if self.frameworks.is_empty() || self.schemes.is_empty() || self.priors.is_empty() || self.tiers.is_empty() {
            return bad("framework, scheme, prior and tier lists must be nonempty");
        }
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty");
        }
        if !(dedup(&self.frameworks) && dedup(&self.schemes) && dedup(&self.priors) && dedup(&self.tiers) && dedup(&self.seeds)) {
            return bad("grid lists must not repeat values");
        }
        let p = &self.preprocess;
        if p.target_spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("target_spacing must be positive");
        }
        if p.window.contains(&0) {
            return bad("window dimensions must be positive");
        }
        if p.histogram_bins < 2 {
            return bad("histogram_bins must be at least 2");
        }
        if !(0.0..=1.0).contains(&p.augmentation_probability) {
            return bad("augmentation_probability must lie in [0, 1]");
        }
        self.trainer.validate()?;
        self.model_spec().validate()?;
        Ok(())
    }

    fn policy(&self, tier: AugmentationTier) -> AugmentationPolicy {
        AugmentationPolicy {
            tier,
            apply_probability: self.preprocess.augmentation_probability,
        }
    }
}

/// Harmonization region for a prior: masked inputs only ever show voxels
/// inside the segmentation, so only those are matched.
pub fn region_for(prior: Prior) -> Region {
    match prior {
        Prior::Baseline => Region::WholeImage,
        Prior::Masked | Prior::PerStructure => Region::MaskOnly,
    }
}

/// Resamples to the common spacing and crops around the heart.
pub fn preprocess_dataset(centers: &[CenterDataset], cfg: &PreprocessConfig) -> Result<Vec<CenterDataset>> {
    let mut out: Vec<CenterDataset> = centers
        .iter()
        .map(|c| {
            let subjects = c
                .subjects
                .par_iter()
                .map(|s| {
                    let prep = |v| -> std::result::Result<_, PhantomError> { crop(&resample(v, cfg.target_spacing)?, cfg.window) };
                    Ok(Subject {
                        subject_id: s.subject_id.clone(),
                        label: s.label,
                        ed: prep(&s.ed)?,
                        es: prep(&s.es)?,
                    })
                })
                .collect::<std::result::Result<Vec<_>, PhantomError>>()?;
            Ok(CenterDataset {
                center_id: c.center_id.clone(),
                subjects,
            })
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| a.center_id.cmp(&b.center_id));
    Ok(out)
}

pub fn rosters(centers: &[CenterDataset]) -> Vec<CenterRoster> {
    centers.iter().map(CenterRoster::of).collect()
}

/// Splits every center's volumes by the fold. Both timepoints of a subject
/// follow the subject.
pub fn fold_sites(centers: &[CenterDataset], fold: &Fold) -> Vec<RawSite> {
    centers
        .iter()
        .map(|c| {
            let mut site = RawSite {
                center_id: c.center_id.clone(),
                train: Vec::new(),
                validation: Vec::new(),
                test: Vec::new(),
            };
            for s in &c.subjects {
                let r = SubjectRef {
                    center_id: c.center_id.clone(),
                    subject_id: s.subject_id.clone(),
                };
                let dest = if fold.test.contains(&r) {
                    &mut site.test
                } else if fold.validation.contains(&r) {
                    &mut site.validation
                } else if fold.train.contains(&r) {
                    &mut site.train
                } else {
                    continue;
                };
                dest.push(s.ed.clone());
                dest.push(s.es.clone());
            }
            site
        })
        .collect()
}

/// Sites of one fold, ready to train. Centers without training samples
/// (the held-out center under LCO-CV) only predict.
pub struct PreparedFold {
    pub training: Vec<Site>,
    pub held_out: Vec<Site>,
    /// Centers whose histograms built the reference; empty without harmonization.
    pub reference_contributors: Vec<String>,
}

pub fn prepare_fold(
    centers: &[CenterDataset],
    fold: &Fold,
    prior: Prior,
    model: &ModelSpec,
    cfg: &PreprocessConfig,
) -> Result<PreparedFold> {
    let raw = fold_sites(centers, fold);
    let region = region_for(prior);
    let reference = if cfg.harmonize {
        Some(build_reference(&raw, region, cfg.histogram_bins)?)
    } else {
        None
    };
    let mut training = Vec::new();
    let mut held_out = Vec::new();
    for r in &raw {
        let site = r.harmonize(reference.as_ref(), region, prior, model)?;
        if site.train_sample_count() > 0 {
            training.push(site);
        } else {
            held_out.push(site);
        }
    }
    Ok(PreparedFold {
        training,
        held_out,
        reference_contributors: reference.map(|r| r.contributors).unwrap_or_default(),
    })
}

/// Trains one framework on one prepared fold and predicts its test set.
pub fn train_fold(
    framework: Framework,
    fold: &PreparedFold,
    setup: &TrainingSetup,
    seed: u64,
) -> Result<(TrainingOutcome, Vec<Prediction>)> {
    let outcome = match framework.weight_scheme() {
        None => run_cds(&fold.training, setup, seed)?,
        Some(scheme) => run_federated(&fold.training, &scheme, setup, seed)?,
    };
    let mut predictions = collect_test_predictions(&fold.training, &setup.model, &outcome.best_params)?;
    predictions.extend(collect_test_predictions(&fold.held_out, &setup.model, &outcome.best_params)?);
    predictions.sort_by(|a, b| (&a.center_id, &a.sample_key).cmp(&(&b.center_id, &b.sample_key)));
    Ok((outcome, predictions))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Cell {
    pub framework: Framework,
    pub scheme: Scheme,
    pub tier: AugmentationTier,
    pub prior: Prior,
}

/// One trained model: a (cell, seed, fold) job.
#[derive(Debug, Clone, Serialize)]
pub struct JobRecord {
    #[serde(flatten)]
    pub cell: Cell,
    pub seed: u64,
    pub fold: usize,
    pub best_round: usize,
    pub best_validation_auc: f64,
    pub rounds: Vec<RoundLog>,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub framework: String,
    pub scheme: String,
    pub tier: String,
    pub prior: String,
    /// Fold index, or `all` for predictions pooled across folds.
    pub fold: String,
    pub seed: u64,
    /// Center id, or `total` for all centers.
    pub center: String,
    pub auc: f64,
}

pub const ALL_FOLDS: &str = "all";
pub const TOTAL: &str = "total";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

impl Stat {
    /// Mean and sample standard deviation (`n - 1`; zero for one value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub framework: String,
    pub scheme: String,
    pub tier: String,
    pub prior: String,
    pub seeds: usize,
    pub total: Stat,
    pub centers: BTreeMap<String, Stat>,
}

/// Mean ± sd across seeds of the pooled (`fold = all`) AUCs, one row per
/// (framework, scheme, tier, prior) in first-seen order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    type Key = (String, String, String, String);
    let mut order: Vec<Key> = Vec::new();
    let mut values: BTreeMap<Key, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.fold == ALL_FOLDS) {
        let key = (r.framework.clone(), r.scheme.clone(), r.tier.clone(), r.prior.clone());
        if !values.contains_key(&key) {
            order.push(key.clone());
        }
        values.entry(key).or_default().entry(r.center.clone()).or_default().push(r.auc);
    }
    order
        .into_iter()
        .map(|key| {
            let per = &values[&key];
            let total = per.get(TOTAL).map(|v| v.as_slice()).unwrap_or(&[]);
            SummaryRow {
                seeds: total.len(),
                total: Stat::of(total),
                centers: per
                    .iter()
                    .filter(|(c, _)| c.as_str() != TOTAL)
                    .map(|(c, v)| (c.clone(), Stat::of(v)))
                    .collect(),
                framework: key.0,
                scheme: key.1,
                tier: key.2,
                prior: key.3,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub fingerprint: String,
    pub jobs: Vec<JobRecord>,
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentResult {
    pub fn total_auc(&self, cell: Cell, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.framework == cell.framework.as_str()
                    && r.scheme == cell.scheme.as_str()
                    && r.tier == cell.tier.as_str()
                    && r.prior == cell.prior.as_str()
                    && r.seed == seed
                    && r.fold == ALL_FOLDS
                    && r.center == TOTAL
            })
            .map(|r| r.auc)
    }

    pub fn summary_for(&self, cell: Cell) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| {
            s.framework == cell.framework.as_str()
                && s.scheme == cell.scheme.as_str()
                && s.tier == cell.tier.as_str()
                && s.prior == cell.prior.as_str()
        })
    }
}

/// Hash of the resolved plan and the raw dataset bytes.
pub fn fingerprint(plan: &ExperimentPlan, centers: &[CenterDataset]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(plan).expect("plan serializes"));
    let mut sorted: Vec<&CenterDataset> = centers.iter().collect();
    sorted.sort_by(|a, b| a.center_id.cmp(&b.center_id));
    for c in sorted {
        for v in c.volumes() {
            h.update(encode_volume(v)?);
        }
    }
    let digest = h.finalize();
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

fn pooled_auc<'a>(preds: impl Iterator<Item = &'a Prediction>) -> Option<f64> {
    let (scores, labels): (Vec<f64>, Vec<u8>) = preds.map(|p| (p.score, p.label)).unzip();
    auc(&scores, &labels).ok()
}

fn result_rows(cell: Cell, seed: u64, jobs: &[&JobRecord]) -> Vec<ResultRow> {
    let row = |fold: String, center: &str, auc: f64| ResultRow {
        framework: cell.framework.as_str().into(),
        scheme: cell.scheme.as_str().into(),
        tier: cell.tier.as_str().into(),
        prior: cell.prior.as_str().into(),
        fold,
        seed,
        center: center.into(),
        auc,
    };
    let pooled: Vec<&Prediction> = jobs.iter().flat_map(|j| &j.predictions).collect();
    let centers: BTreeSet<&str> = pooled.iter().map(|p| p.center_id.as_str()).collect();
    let mut rows = Vec::new();
    if let Some(a) = pooled_auc(pooled.iter().copied()) {
        rows.push(row(ALL_FOLDS.into(), TOTAL, a));
    }
    for c in centers {
        if let Some(a) = pooled_auc(pooled.iter().copied().filter(|p| p.center_id == c)) {
            rows.push(row(ALL_FOLDS.into(), c, a));
        }
    }
    for j in jobs {
        if let Some(a) = pooled_auc(j.predictions.iter()) {
            rows.push(row(j.fold.to_string(), TOTAL, a));
        }
    }
    rows
}

/// Runs the full grid on `centers` (raw generator output).
pub fn run_experiment(plan: &ExperimentPlan, centers: &[CenterDataset]) -> Result<ExperimentResult> {
    plan.validate()?;
    let fingerprint = fingerprint(plan, centers)?;
    let data = preprocess_dataset(centers, &plan.preprocess)?;
    let roster = rosters(&data);
    let model = plan.model_spec();

    let mut jobs: Vec<JobRecord> = Vec::new();
    for &scheme in &plan.schemes {
        let folds = plan_folds(scheme, &roster, plan.split_seed)?;
        for &prior in &plan.priors {
            let prepared = folds
                .folds
                .par_iter()
                .map(|f| prepare_fold(&data, f, prior, &model, &plan.preprocess))
                .collect::<Result<Vec<_>>>()?;
            let mut grid = Vec::new();
            for &framework in &plan.frameworks {
                for &tier in &plan.tiers {
                    for &seed in &plan.seeds {
                        for fold in 0..prepared.len() {
                            grid.push((Cell { framework, scheme, tier, prior }, seed, fold));
                        }
                    }
                }
            }
            let done = grid
                .par_iter()
                .map(|&(cell, seed, fold)| {
                    let setup = TrainingSetup {
                        model: model.clone(),
                        trainer: plan.trainer.clone(),
                        augmentation: plan.policy(cell.tier),
                        parallel: false,
                    };
                    let (outcome, predictions) = train_fold(cell.framework, &prepared[fold], &setup, seed)?;
                    Ok(JobRecord {
                        cell,
                        seed,
                        fold,
                        best_round: outcome.best_round,
                        best_validation_auc: outcome.best_score,
                        rounds: outcome.logs,
                        predictions,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            jobs.extend(done);
        }
    }

    let mut groups: BTreeMap<(Cell, u64), Vec<&JobRecord>> = BTreeMap::new();
    for j in &jobs {
        groups.entry((j.cell, j.seed)).or_default().push(j);
    }
    let mut cells: Vec<Cell> = Vec::new();
    for j in &jobs {
        if !cells.contains(&j.cell) {
            cells.push(j.cell);
        }
    }
    let mut rows = Vec::new();
    for cell in cells {
        for &seed in &plan.seeds {
            rows.extend(result_rows(cell, seed, &groups[&(cell, seed)]));
        }
    }
    let summary = summarize(&rows);
    Ok(ExperimentResult {
        fingerprint,
        jobs,
        rows,
        summary,
    })
}

pub fn plan_folds(scheme: Scheme, roster: &[CenterRoster], seed: u64) -> Result<FoldPlan> {
    Ok(plan(scheme, roster, seed)?)
}

/// Human-readable plan: fold sizes, batch sizes and reference scope, without
/// any training.
pub fn describe_plan(plan: &ExperimentPlan, centers: &[CenterDataset]) -> Result<String> {
    plan.validate()?;
    let roster = rosters(centers);
    let mut out = String::new();
    let model = plan.model_spec();
    let _ = writeln!(
        out,
        "grid: {} framework(s) x {} scheme(s) x {} prior(s) x {} tier(s) x {} seed(s)",
        plan.frameworks.len(),
        plan.schemes.len(),
        plan.priors.len(),
        plan.tiers.len(),
        plan.seeds.len()
    );
    let _ = writeln!(
        out,
        "model: {:?}, {} features, {} parameters",
        model.kind,
        model.feature_len(),
        model.parameter_len()
    );
    let it = plan.trainer.iterations_per_round;
    for &scheme in &plan.schemes {
        let folds = plan_folds(scheme, &roster, plan.split_seed)?;
        let _ = writeln!(out, "scheme {}: {} folds", scheme.as_str(), folds.fold_count());
        for (i, fold) in folds.folds.iter().enumerate() {
            let _ = writeln!(
                out,
                "  fold {i}: {} train / {} validation / {} test subjects",
                fold.train.len(),
                fold.validation.len(),
                fold.test.len()
            );
            let mut pooled = 0;
            let mut k = 0;
            let mut contributors = Vec::new();
            for c in &roster {
                let count = |set: &BTreeSet<SubjectRef>| set.iter().filter(|r| r.center_id == c.center_id).count();
                let (tr, va, te) = (count(&fold.train), count(&fold.validation), count(&fold.test));
                let samples = 2 * tr;
                let batch = if samples > 0 {
                    k += 1;
                    pooled += samples;
                    batch_size_for(samples, it).to_string()
                } else {
                    "-".into()
                };
                if tr + va > 0 {
                    contributors.push(c.center_id.as_str());
                }
                let _ = writeln!(
                    out,
                    "    {:<18} train {tr:>3} val {va:>3} test {te:>3} subjects, fl batch {batch}",
                    c.center_id
                );
            }
            if k > 0 {
                let _ = writeln!(out, "    cds batch {} over {} steps", batch_size_for(pooled, k * it), k * it);
            }
            if plan.preprocess.harmonize {
                let _ = writeln!(out, "    reference histogram from: {}", contributors.join(", "));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(center: &str, seed: u64, auc: f64) -> ResultRow {
        ResultRow {
            framework: "fl".into(),
            scheme: "ccv".into(),
            tier: "none".into(),
            prior: "masked".into(),
            fold: ALL_FOLDS.into(),
            seed,
            center: center.into(),
            auc,
        }
    }

    #[test]
    fn stat_uses_sample_sd() {
        let s = Stat::of(&[0.6, 0.8]);
        assert!((s.mean - 0.7).abs() < 1e-15);
        assert!((s.sd - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[0.4]).sd, 0.0);
    }

    #[test]
    fn summary_groups_by_cell() {
        let mut rows = vec![row(TOTAL, 0, 0.7), row("a", 0, 0.6), row(TOTAL, 1, 0.9), row("a", 1, 0.8)];
        let mut per_fold = row(TOTAL, 0, 0.1);
        per_fold.fold = "0".into();
        rows.push(per_fold);
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].seeds, 2);
        assert!((s[0].total.mean - 0.8).abs() < 1e-12);
        assert!((s[0].centers["a"].mean - 0.7).abs() < 1e-12);
    }
}
