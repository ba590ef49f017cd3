//! Synthetic multi-center cardiac phantoms.
//!
//! Each subject is a pair of volumes (end-diastole and end-systole) holding a
//! left-ventricle blood pool wrapped in a myocardial shell, with a right
//! ventricle crescent on one side. Hypertrophic subjects get a thicker shell.
//! Centers differ in voxel spacing, intensity gain/offset, noise, and class
//! mix, which gives the non-IID shift the cross-validation schemes probe.

mod generator;
pub mod io;
mod transform;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid3;

pub use generator::{default_profiles, generate_center, PhantomGeometry};
pub use transform::{crop, induce_prior, mask_bbox_center, resample, Prior};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid center profile {center}: {reason}")]
    InvalidProfile { center: String, reason: String },
    #[error("subject {subject} of center {center} does not fit the {dims:?} grid")]
    GeometryOutOfGrid {
        center: String,
        subject: String,
        dims: [usize; 3],
    },
    #[error("target spacing {0:?} must be positive")]
    InvalidSpacing([f64; 3]),
    #[error("segmentation mask of {0} is empty")]
    EmptyMask(String),
    #[error("volume file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PhantomError>;

pub const MASK_BACKGROUND: u8 = 0;
pub const MASK_RV: u8 = 1;
pub const MASK_MYOCARDIUM: u8 = 2;
pub const MASK_LV: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "NOR")]
    Normal,
    #[serde(rename = "HCM")]
    Hypertrophic,
}

impl ClassLabel {
    pub fn as_u8(self) -> u8 {
        match self {
            ClassLabel::Normal => 0,
            ClassLabel::Hypertrophic => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ClassLabel::Normal),
            1 => Some(ClassLabel::Hypertrophic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Timepoint {
    ED,
    ES,
}

impl Timepoint {
    pub fn as_str(self) -> &'static str {
        match self {
            Timepoint::ED => "ED",
            Timepoint::ES => "ES",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub intensities: Grid3<f64>,
    /// Millimetres per voxel along x, y, z.
    pub spacing: [f64; 3],
    pub mask: Grid3<u8>,
    pub label: ClassLabel,
    pub center_id: String,
    pub subject_id: String,
    pub timepoint: Timepoint,
}

impl Volume {
    pub fn dims(&self) -> [usize; 3] {
        self.intensities.dims()
    }

    /// `<subject_id>_<ED|ES>`, unique within a center.
    pub fn sample_key(&self) -> String {
        format!("{}_{}", self.subject_id, self.timepoint.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gaussian {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterProfile {
    pub center_id: String,
    pub n_subjects: usize,
    /// Fraction of subjects labelled HCM.
    pub class_balance: f64,
    pub intensity_offset: f64,
    pub intensity_scale: f64,
    pub noise_sigma: f64,
    pub spacing: [f64; 3],
    /// Myocardial wall thickness in mm.
    pub myo_thickness_nor: Gaussian,
    pub myo_thickness_hcm: Gaussian,
    /// In-plane rotation of the heart about the LV axis, in degrees. Stands
    /// in for a site's slice-planning convention.
    #[serde(default)]
    pub orientation_deg: f64,
}

impl CenterProfile {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| {
            Err(PhantomError::InvalidProfile {
                center: self.center_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.center_id.is_empty()
            || !self
                .center_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return fail("center_id must be non-empty [A-Za-z0-9_-]");
        }
        if !(0.0..=1.0).contains(&self.class_balance) {
            return fail("class_balance must lie in [0, 1]");
        }
        if !(self.intensity_scale > 0.0) || !self.intensity_offset.is_finite() {
            return fail("intensity_scale must be positive and offset finite");
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be nonnegative");
        }
        if !self.orientation_deg.is_finite() {
            return fail("orientation_deg must be finite");
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return fail("spacing must be positive");
        }
        let t = (&self.myo_thickness_nor, &self.myo_thickness_hcm);
        if !(t.0.mean > 0.0 && t.1.mean > 0.0) || t.0.sd < 0.0 || t.1.sd < 0.0 {
            return fail("thickness means must be positive and sds nonnegative");
        }
        if !(t.1.mean > t.0.mean) {
            return fail("HCM thickness mean must exceed NOR mean");
        }
        Ok(())
    }

    /// `(NOR, HCM)` subject counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let hcm = (self.n_subjects as f64 * self.class_balance).round() as usize;
        let hcm = hcm.min(self.n_subjects);
        (self.n_subjects - hcm, hcm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub subject_id: String,
    pub label: ClassLabel,
    pub ed: Volume,
    pub es: Volume,
}

impl Subject {
    pub fn volumes(&self) -> [&Volume; 2] {
        [&self.ed, &self.es]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterDataset {
    pub center_id: String,
    pub subjects: Vec<Subject>,
}

impl CenterDataset {
    /// `n_k`: ED and ES count as separate samples.
    pub fn sample_count(&self) -> usize {
        2 * self.subjects.len()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let hcm = self
            .subjects
            .iter()
            .filter(|s| s.label == ClassLabel::Hypertrophic)
            .count();
        (self.subjects.len() - hcm, hcm)
    }

    pub fn volumes(&self) -> impl Iterator<Item = &Volume> {
        self.subjects.iter().flat_map(|s| s.volumes())
    }

    pub fn map_volumes(&self, mut f: impl FnMut(&Volume) -> Result<Volume>) -> Result<Self> {
        let subjects = self
            .subjects
            .iter()
            .map(|s| {
                Ok(Subject {
                    subject_id: s.subject_id.clone(),
                    label: s.label,
                    ed: f(&s.ed)?,
                    es: f(&s.es)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            center_id: self.center_id.clone(),
            subjects,
        })
    }
}
