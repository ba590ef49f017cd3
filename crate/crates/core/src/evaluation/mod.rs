//! Fold planning, AUC and repeated-seed experiment execution.

mod auc;
mod experiment;
mod folds;

pub use auc::{auc, AucError};
pub use experiment::*;
pub use folds::{
    plan, plan_ccv, plan_lco, CenterRoster, Fold, FoldError, FoldPlan, Scheme, SubjectRef, CCV_FOLDS,
    VALIDATION_FRACTION,
};
