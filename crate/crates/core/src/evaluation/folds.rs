//! Collaborative (CCV) and leave-center-out (LCO-CV) fold planning.
//!
//! Plans are made over subjects, never over individual volumes, so the ED and
//! ES frames of a subject always land in the same split.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phantom::{CenterDataset, ClassLabel};
use crate::seeding;

pub const CCV_FOLDS: usize = 5;
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum FoldError {
    #[error("center {center} has {subjects} subjects; collaborative CV needs at least {CCV_FOLDS} so every fold gets a test subject")]
    CenterTooSmall { center: String, subjects: usize },
    #[error("leave-center-out CV needs at least two centers, got {0}")]
    TooFewCenters(usize),
    #[error("no centers given")]
    NoCenters,
    #[error("duplicate center id {0}")]
    DuplicateCenter(String),
    #[error("duplicate subject id {subject} in center {center}")]
    DuplicateSubject { center: String, subject: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Ccv,
    Lco,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Ccv => "ccv",
            Scheme::Lco => "lco",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubjectRef {
    pub center_id: String,
    pub subject_id: String,
}

impl fmt::Display for SubjectRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.center_id, self.subject_id)
    }
}

/// A center's subject list with labels; all the planner needs to know.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterRoster {
    pub center_id: String,
    pub subjects: Vec<(String, ClassLabel)>,
}

impl CenterRoster {
    pub fn of(dataset: &CenterDataset) -> Self {
        Self {
            center_id: dataset.center_id.clone(),
            subjects: dataset
                .subjects
                .iter()
                .map(|s| (s.subject_id.clone(), s.label))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Fold {
    pub train: BTreeSet<SubjectRef>,
    pub validation: BTreeSet<SubjectRef>,
    pub test: BTreeSet<SubjectRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub scheme: Scheme,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn fold_count(&self) -> usize {
        self.folds.len()
    }
}

fn canonical(centers: &[CenterRoster]) -> Result<Vec<&CenterRoster>, FoldError> {
    if centers.is_empty() {
        return Err(FoldError::NoCenters);
    }
    let mut sorted: Vec<&CenterRoster> = centers.iter().collect();
    sorted.sort_by(|a, b| a.center_id.cmp(&b.center_id));
    for w in sorted.windows(2) {
        if w[0].center_id == w[1].center_id {
            return Err(FoldError::DuplicateCenter(w[0].center_id.clone()));
        }
    }
    for c in &sorted {
        let mut seen = BTreeSet::new();
        for (s, _) in &c.subjects {
            if !seen.insert(s) {
                return Err(FoldError::DuplicateSubject {
                    center: c.center_id.clone(),
                    subject: s.clone(),
                });
            }
        }
    }
    Ok(sorted)
}

fn subject_ref(center: &str, subject: &str) -> SubjectRef {
    SubjectRef {
        center_id: center.to_string(),
        subject_id: subject.to_string(),
    }
}

/// Subjects of one class, in a seeded random order. Input order is
/// normalized first so the result only depends on the set of subjects.
fn shuffled_class<'a>(
    subjects: &'a [(String, ClassLabel)],
    class: ClassLabel,
    rng: &mut impl Rng,
) -> Vec<&'a str> {
    let mut ids: Vec<&str> = subjects
        .iter()
        .filter(|(_, l)| *l == class)
        .map(|(s, _)| s.as_str())
        .collect();
    ids.sort_unstable();
    ids.shuffle(rng);
    ids
}

/// Largest-remainder apportionment of `total` over `weights`; ties go to the
/// lower index.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|&w| total as f64 * w as f64 / sum as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        if out[i] < weights[i] {
            out[i] += 1;
            left -= 1;
        }
    }
    out
}

/// Splits each center's non-test subjects into train and a stratified ~10%
/// validation part, then makes sure the pooled validation set holds both
/// classes whenever the pooled training pool does.
fn split_validation(
    pools: &[(String, Vec<(String, ClassLabel)>)],
    seed: u64,
    tag: &str,
    fold: &mut Fold,
) {
    let mut leftovers: Vec<(ClassLabel, Vec<SubjectRef>)> = Vec::new();
    for (center, subjects) in pools {
        let m = subjects.len();
        if m == 0 {
            continue;
        }
        let want = if m >= 2 {
            ((VALIDATION_FRACTION * m as f64).round() as usize).max(1)
        } else {
            0
        };
        let classes = [ClassLabel::Normal, ClassLabel::Hypertrophic];
        let per_class: Vec<Vec<&str>> = classes
            .iter()
            .map(|&c| {
                let mut rng = seeding::stream(seed, &["validation", tag, center, &format!("{c:?}")]);
                shuffled_class(subjects, c, &mut rng)
            })
            .collect();
        let quotas = apportion(want, &per_class.iter().map(Vec::len).collect::<Vec<_>>());
        for ((class, ids), quota) in classes.iter().zip(&per_class).zip(quotas) {
            let (val, train) = ids.split_at(quota);
            fold.validation.extend(val.iter().map(|s| subject_ref(center, s)));
            let train: Vec<SubjectRef> = train.iter().map(|s| subject_ref(center, s)).collect();
            fold.train.extend(train.iter().cloned());
            leftovers.push((*class, train));
        }
    }
    for class in [ClassLabel::Normal, ClassLabel::Hypertrophic] {
        let label_of = |r: &SubjectRef| {
            pools
                .iter()
                .find(|(c, _)| *c == r.center_id)
                .and_then(|(_, s)| s.iter().find(|(id, _)| *id == r.subject_id))
                .map(|(_, l)| *l)
        };
        let has_class = fold.validation.iter().any(|r| label_of(r) == Some(class));
        if has_class {
            continue;
        }
        // Move one subject from the center with the most training subjects of this class.
        let donor = leftovers
            .iter()
            .filter(|(c, train)| *c == class && train.len() >= 2)
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.1[0].cmp(&a.1[0])));
        if let Some((_, train)) = donor {
            let moved = train[0].clone();
            fold.train.remove(&moved);
            fold.validation.insert(moved);
        }
    }
}

/// Collaborative CV: every center deals its (class-ordered, shuffled)
/// subjects round-robin into five test folds, continuing the deal across
/// centers so fold totals differ by at most one.
pub fn plan_ccv(centers: &[CenterRoster], seed: u64) -> Result<FoldPlan, FoldError> {
    let sorted = canonical(centers)?;
    for c in &sorted {
        if c.subjects.len() < CCV_FOLDS {
            return Err(FoldError::CenterTooSmall {
                center: c.center_id.clone(),
                subjects: c.subjects.len(),
            });
        }
    }
    let mut assignment: Vec<Vec<(String, usize)>> = Vec::new();
    let mut dealt = 0usize;
    for c in &sorted {
        let mut order = Vec::new();
        for class in [ClassLabel::Normal, ClassLabel::Hypertrophic] {
            let mut rng = seeding::stream(seed, &["ccv", &c.center_id, &format!("{class:?}")]);
            order.extend(shuffled_class(&c.subjects, class, &mut rng));
        }
        assignment.push(
            order
                .iter()
                .enumerate()
                .map(|(j, s)| (s.to_string(), (dealt + j) % CCV_FOLDS))
                .collect(),
        );
        dealt += order.len();
    }

    let mut folds = Vec::with_capacity(CCV_FOLDS);
    for f in 0..CCV_FOLDS {
        let mut fold = Fold::default();
        let mut pools = Vec::new();
        for (c, assigned) in sorted.iter().zip(&assignment) {
            let mut rest = Vec::new();
            for (s, fold_of) in assigned {
                if *fold_of == f {
                    fold.test.insert(subject_ref(&c.center_id, s));
                } else {
                    let label = c.subjects.iter().find(|(id, _)| id == s).map(|(_, l)| *l).expect("own subject");
                    rest.push((s.clone(), label));
                }
            }
            pools.push((c.center_id.clone(), rest));
        }
        split_validation(&pools, seed, &format!("ccv-{f}"), &mut fold);
        folds.push(fold);
    }
    Ok(FoldPlan {
        scheme: Scheme::Ccv,
        folds,
    })
}

/// Leave-center-out CV: fold `i` tests on the `i`-th center (ascending id).
pub fn plan_lco(centers: &[CenterRoster], seed: u64) -> Result<FoldPlan, FoldError> {
    let sorted = canonical(centers)?;
    if sorted.len() < 2 {
        return Err(FoldError::TooFewCenters(sorted.len()));
    }
    let folds = sorted
        .iter()
        .enumerate()
        .map(|(i, held_out)| {
            let mut fold = Fold::default();
            fold.test
                .extend(held_out.subjects.iter().map(|(s, _)| subject_ref(&held_out.center_id, s)));
            let pools: Vec<_> = sorted
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, c)| (c.center_id.clone(), c.subjects.clone()))
                .collect();
            split_validation(&pools, seed, &format!("lco-{}", held_out.center_id), &mut fold);
            fold
        })
        .collect();
    Ok(FoldPlan {
        scheme: Scheme::Lco,
        folds,
    })
}

pub fn plan(scheme: Scheme, centers: &[CenterRoster], seed: u64) -> Result<FoldPlan, FoldError> {
    match scheme {
        Scheme::Ccv => plan_ccv(centers, seed),
        Scheme::Lco => plan_lco(centers, seed),
    }
}
