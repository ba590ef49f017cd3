#![allow(dead_code)]

use std::collections::BTreeSet;

use fhsim::augmentation::{AugmentationPolicy, AugmentationTier};
use fhsim::config::generate;
use fhsim::evaluation::{auc, plan_ccv, plan_lco, prepare_fold, preprocess_dataset, rosters, CenterRoster, FoldPlan, PreparedFold, PreprocessConfig, Scheme};
use fhsim::federation::TrainingSetup;
use fhsim::model::{loss_features, ModelSpec, ParameterVector, TrainerConfig};
use fhsim::phantom::{default_profiles, CenterDataset, CenterProfile, ClassLabel, Gaussian, PhantomGeometry, Prior};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Default four-center dataset after resampling and cropping.
pub fn default_preprocessed(seed: u64) -> Vec<CenterDataset> {
    let raw = generate(&default_profiles(), &PhantomGeometry::default(), seed).unwrap();
    preprocess_dataset(&raw, &PreprocessConfig::default()).unwrap()
}

pub fn model() -> ModelSpec {
    fhsim::evaluation::ExperimentPlan::default().model_spec()
}

pub fn setup(tier: AugmentationTier) -> TrainingSetup {
    TrainingSetup {
        model: model(),
        trainer: TrainerConfig::default(),
        augmentation: AugmentationPolicy::new(tier),
        parallel: false,
    }
}

pub fn folds(data: &[CenterDataset], scheme: Scheme, seed: u64) -> FoldPlan {
    let r = rosters(data);
    match scheme {
        Scheme::Ccv => plan_ccv(&r, seed).unwrap(),
        Scheme::Lco => plan_lco(&r, seed).unwrap(),
    }
}

pub fn prepared(data: &[CenterDataset], plan: &FoldPlan, fold: usize) -> PreparedFold {
    prepare_fold(data, &plan.folds[fold], Prior::Masked, &model(), &PreprocessConfig::default()).unwrap()
}

/// Profile with well separated wall thicknesses and little noise.
pub fn separable_profiles() -> Vec<CenterProfile> {
    default_profiles()
        .into_iter()
        .map(|mut p| {
            p.myo_thickness_nor = Gaussian { mean: 4.0, sd: 0.3 };
            p.myo_thickness_hcm = Gaussian { mean: 13.0, sd: 0.3 };
            p.noise_sigma = 0.01;
            p.orientation_deg = 0.0;
            p
        })
        .collect()
}

/// Brute-force Mann-Whitney AUC: concordant pairs plus half the ties.
pub fn auc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Random scores with deliberate ties and both classes present.
pub fn random_auc_instance(rng: &mut impl Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=200);
    let levels = rng.random_range(1..=20);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let scores = (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                rng.random_range(0..levels) as f64 / levels as f64
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    (scores, labels)
}

pub fn auc_matches_oracle(scores: &[f64], labels: &[u8]) -> bool {
    auc(scores, labels).unwrap() == auc_oracle(scores, labels)
}

/// Random roster: 1-6 centers of 5-40 subjects, each class present.
pub fn random_roster(rng: &mut impl Rng, min_centers: usize) -> Vec<CenterRoster> {
    let k = rng.random_range(min_centers..=6);
    (0..k)
        .map(|c| {
            let n = rng.random_range(5..=40);
            let subjects = (0..n)
                .map(|i| {
                    let label = if i == 0 {
                        ClassLabel::Normal
                    } else if i == 1 {
                        ClassLabel::Hypertrophic
                    } else if rng.random_bool(0.5) {
                        ClassLabel::Hypertrophic
                    } else {
                        ClassLabel::Normal
                    };
                    (format!("c{c}-s{i:03}"), label)
                })
                .collect();
            CenterRoster {
                center_id: format!("c{c}"),
                subjects,
            }
        })
        .collect()
}

/// Checks every fold-plan law; returns the first violation.
pub fn check_fold_laws(roster: &[CenterRoster], plan: &FoldPlan) -> Result<(), String> {
    let all: BTreeSet<(String, String)> = roster
        .iter()
        .flat_map(|c| c.subjects.iter().map(move |(s, _)| (c.center_id.clone(), s.clone())))
        .collect();
    let key = |r: &fhsim::evaluation::SubjectRef| (r.center_id.clone(), r.subject_id.clone());
    let mut tested = BTreeSet::new();
    for (i, f) in plan.folds.iter().enumerate() {
        let sets = [&f.train, &f.validation, &f.test];
        let total: usize = sets.iter().map(|s| s.len()).sum();
        let union: BTreeSet<_> = sets.iter().flat_map(|s| s.iter().map(key)).collect();
        if union.len() != total {
            return Err(format!("fold {i}: train/validation/test overlap"));
        }
        if union != all {
            return Err(format!("fold {i}: sets do not cover every subject"));
        }
        for r in &f.test {
            if !tested.insert(key(r)) {
                return Err(format!("fold {i}: subject {} tested twice", r.subject_id));
            }
        }
        match plan.scheme {
            Scheme::Ccv => {
                for c in roster {
                    let m = c.subjects.len();
                    let got = f.test.iter().filter(|r| r.center_id == c.center_id).count();
                    if (got as f64 - m as f64 / 5.0).abs() >= 1.0 + 1e-9 {
                        return Err(format!("fold {i}: center {} tests {got} of {m}", c.center_id));
                    }
                }
            }
            Scheme::Lco => {
                let centers: BTreeSet<&str> = f.test.iter().map(|r| r.center_id.as_str()).collect();
                if centers.len() != 1 {
                    return Err(format!("fold {i}: test spans {} centers", centers.len()));
                }
                let c = roster.iter().find(|c| centers.contains(c.center_id.as_str())).unwrap();
                if f.test.len() != c.subjects.len() {
                    return Err(format!("fold {i}: test is not the whole of {}", c.center_id));
                }
            }
        }
    }
    if tested != all {
        return Err("test folds do not partition the subjects".into());
    }
    let expected = match plan.scheme {
        Scheme::Ccv => 5,
        Scheme::Lco => roster.len(),
    };
    if plan.fold_count() != expected {
        return Err(format!("{} folds, expected {expected}", plan.fold_count()));
    }
    Ok(())
}

/// Every fold keeps both timepoints of a subject in the same partition once
/// volumes are split.
pub fn check_timepoints_colocated(data: &[CenterDataset], plan: &FoldPlan) -> Result<(), String> {
    for (i, f) in plan.folds.iter().enumerate() {
        for site in fhsim::evaluation::fold_sites(data, f) {
            for (name, part) in [("train", &site.train), ("validation", &site.validation), ("test", &site.test)] {
                let subjects: BTreeSet<&str> = part.iter().map(|v| v.subject_id.as_str()).collect();
                for s in subjects {
                    let n = part.iter().filter(|v| v.subject_id == s).count();
                    if n != 2 {
                        return Err(format!("fold {i}: {s} has {n} volume(s) in {name}"));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Random small model, parameters and feature batch.
pub fn random_draw(rng: &mut impl Rng, mlp: bool) -> (ModelSpec, ParameterVector, Vec<Vec<f64>>, Vec<u8>) {
    let shape = [rng.random_range(1..=3), rng.random_range(2..=6), rng.random_range(2..=6), rng.random_range(1..=3)];
    let f = rng.random_range(1..=3);
    let spec = if mlp {
        ModelSpec::mlp(shape, rng.random_range(1..=6), f)
    } else {
        ModelSpec::logistic(shape, f)
    };
    let values = (0..spec.parameter_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let params = ParameterVector::new(values, spec.layout_id()).unwrap();
    let batch = rng.random_range(1..=6);
    let rows = (0..batch)
        .map(|_| (0..spec.feature_len()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let labels = (0..batch).map(|_| rng.random_range(0..=1)).collect();
    (spec, params, rows, labels)
}

/// Central differences of the mean BCE with step `h`.
pub fn finite_difference(spec: &ModelSpec, params: &ParameterVector, rows: &[Vec<f64>], labels: &[u8], h: f64) -> Vec<f64> {
    (0..params.len())
        .map(|i| {
            let mut plus = params.values().to_vec();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            let lp = loss_features(spec, &ParameterVector::new(plus, spec.layout_id()).unwrap(), rows, labels).unwrap();
            let lm = loss_features(spec, &ParameterVector::new(minus, spec.layout_id()).unwrap(), rows, labels).unwrap();
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn center_mean_histogram(volumes: &[&fhsim::phantom::Volume], edges: &[f64]) -> Vec<f64> {
    let mut mean = vec![0.0; edges.len() - 1];
    for v in volumes {
        let h = fhsim::harmonization::subject_histogram(v, fhsim::harmonization::Region::MaskOnly, edges).unwrap();
        mean.iter_mut().zip(h).for_each(|(m, x)| *m += x / volumes.len() as f64);
    }
    mean
}

fn mean_pairwise_l1(per_center: &[Vec<&fhsim::phantom::Volume>], edges: &[f64]) -> f64 {
    let hists: Vec<Vec<f64>> = per_center.iter().map(|v| center_mean_histogram(v, edges)).collect();
    let mut total = 0.0;
    let mut pairs = 0.0;
    for i in 0..hists.len() {
        for j in i + 1..hists.len() {
            total += fhsim::harmonization::l1_distance(&hists[i], &hists[j]);
            pairs += 1.0;
        }
    }
    total / pairs
}

/// Mean pairwise L1 distance between center-mean masked histograms before
/// and after matching every volume to the all-center average reference.
/// Both are measured on one shared set of bins.
pub fn harmonization_l1(data: &[CenterDataset]) -> (f64, f64) {
    use fhsim::federation::{build_reference, RawSite};
    use fhsim::harmonization::{match_histogram, region_bounds, uniform_edges, Region};
    let sites: Vec<RawSite> = data
        .iter()
        .map(|c| RawSite {
            center_id: c.center_id.clone(),
            train: c.volumes().cloned().collect(),
            validation: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    let reference = build_reference(&sites, Region::MaskOnly, 256).unwrap();
    let matched: Vec<Vec<fhsim::phantom::Volume>> = data
        .iter()
        .map(|c| c.volumes().map(|v| match_histogram(v, &reference, Region::MaskOnly).unwrap()).collect())
        .collect();
    let (lo, hi) = data
        .iter()
        .flat_map(|c| c.volumes())
        .chain(matched.iter().flatten())
        .filter_map(|v| region_bounds(v, Region::MaskOnly))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |a, b| (a.0.min(b.0), a.1.max(b.1)));
    let edges = uniform_edges(lo, hi, 256).unwrap();
    let before: Vec<Vec<&fhsim::phantom::Volume>> = data.iter().map(|c| c.volumes().collect()).collect();
    let after: Vec<Vec<&fhsim::phantom::Volume>> = matched.iter().map(|c| c.iter().collect()).collect();
    (mean_pairwise_l1(&before, &edges), mean_pairwise_l1(&after, &edges))
}

/// One-voxel volumes for every subject of a roster; enough to exercise
/// fold splitting without generating images.
pub fn dummy_dataset(roster: &[CenterRoster]) -> Vec<CenterDataset> {
    use fhsim::grid::Grid3;
    use fhsim::phantom::{Subject, Timepoint, Volume};
    let vol = |c: &str, s: &str, label: ClassLabel, timepoint: Timepoint| Volume {
        intensities: Grid3::filled([1, 1, 1], 0.0),
        spacing: [1.0; 3],
        mask: Grid3::filled([1, 1, 1], 2),
        label,
        center_id: c.to_string(),
        subject_id: s.to_string(),
        timepoint,
    };
    roster
        .iter()
        .map(|c| CenterDataset {
            center_id: c.center_id.clone(),
            subjects: c
                .subjects
                .iter()
                .map(|(s, l)| Subject {
                    subject_id: s.clone(),
                    label: *l,
                    ed: vol(&c.center_id, s, *l, Timepoint::ED),
                    es: vol(&c.center_id, s, *l, Timepoint::ES),
                })
                .collect(),
        })
        .collect()
}
