use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    CenterDataset, CenterProfile, ClassLabel, Gaussian, PhantomError, Result, Subject, Timepoint,
    Volume, MASK_BACKGROUND, MASK_LV, MASK_MYOCARDIUM, MASK_RV,
};
use crate::grid::Grid3;
use crate::seeding;

/// Anatomy and intensity constants shared by every center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomGeometry {
    pub field_of_view_mm: [f64; 3],
    /// In-plane radius of the LV blood pool at end-diastole.
    pub cavity_radius_mm: Gaussian,
    /// Long-axis (z) semi-axis of the cavity as a multiple of its radius.
    pub long_axis_ratio: f64,
    /// RV centre sits this many outer-LV radii away along -x.
    pub rv_offset_ratio: f64,
    /// RV in-plane radius as a multiple of the outer LV radius.
    pub rv_radius_ratio: f64,
    pub center_jitter_mm: f64,
    /// End-systole shrinks the cavity by this fraction and thickens the wall by it.
    pub contraction: f64,
    pub base_background: f64,
    pub base_rv: f64,
    pub base_myocardium: f64,
    pub base_lv: f64,
}

impl Default for PhantomGeometry {
    fn default() -> Self {
        Self {
            field_of_view_mm: [120.0, 120.0, 90.0],
            cavity_radius_mm: Gaussian { mean: 11.0, sd: 1.2 },
            long_axis_ratio: 1.4,
            rv_offset_ratio: 0.8,
            rv_radius_ratio: 0.8,
            center_jitter_mm: 5.0,
            contraction: 0.3,
            base_background: 0.1,
            base_rv: 0.5,
            base_myocardium: 0.35,
            base_lv: 0.6,
        }
    }
}

/// Four centers whose sizes, class mix, vendors and resolutions echo the
/// M&M/ACDC cohort: 23, 35, 12 and 20 subjects (46/70/24/40 samples).
pub fn default_profiles() -> Vec<CenterProfile> {
    let profile = |id: &str,
                   n: usize,
                   balance: f64,
                   offset: f64,
                   scale: f64,
                   noise: f64,
                   spacing: [f64; 3],
                   nor: (f64, f64),
                   hcm: (f64, f64),
                   orientation: f64| CenterProfile {
        center_id: id.to_string(),
        n_subjects: n,
        class_balance: balance,
        intensity_offset: offset,
        intensity_scale: scale,
        noise_sigma: noise,
        spacing,
        myo_thickness_nor: Gaussian { mean: nor.0, sd: nor.1 },
        myo_thickness_hcm: Gaussian { mean: hcm.0, sd: hcm.1 },
        orientation_deg: orientation,
    };
    vec![
        profile("vall-dhebron", 23, 0.54, 0.2, 1.0, 0.03, [1.2, 1.2, 10.0], (6.0, 1.0), (10.0, 1.8), 0.0),
        profile("sagrada-familia", 35, 0.53, -0.2, 1.3, 0.04, [1.3, 1.3, 9.0], (6.2, 1.0), (10.5, 2.0), 60.0),
        profile("santpau", 12, 0.42, 0.2, 0.8, 0.05, [1.0, 1.0, 10.0], (5.8, 1.1), (9.5, 2.0), -60.0),
        profile("acdc", 20, 0.5, -0.2, 1.15, 0.06, [1.5, 1.5, 8.0], (6.8, 1.2), (9.0, 1.8), 120.0),
    ]
}

struct Shape {
    center: [f64; 3],
    /// `(cos, sin)` of the in-plane orientation.
    rotation: (f64, f64),
    cavity_r: f64,
    cavity_z: f64,
    outer_r: f64,
    outer_z: f64,
    rv_center: [f64; 3],
    rv_r: [f64; 3],
}

impl Shape {
    fn new(center: [f64; 3], orientation_deg: f64, cavity_r: f64, thickness: f64, g: &PhantomGeometry) -> Self {
        let cavity_z = g.long_axis_ratio * cavity_r;
        let outer_r = cavity_r + thickness;
        let outer_z = cavity_z + thickness;
        let rv_r_inplane = g.rv_radius_ratio * outer_r;
        let (sin, cos) = orientation_deg.to_radians().sin_cos();
        Self {
            center,
            rotation: (cos, sin),
            cavity_r,
            cavity_z,
            outer_r,
            outer_z,
            rv_center: [-g.rv_offset_ratio * outer_r, 0.0, 0.0],
            rv_r: [rv_r_inplane, 1.25 * rv_r_inplane, 0.85 * outer_z],
        }
    }

    /// Offset from the LV centre in the heart's own frame.
    fn local(&self, p: [f64; 3]) -> [f64; 3] {
        let (c, s) = self.rotation;
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    fn classify(&self, p: [f64; 3]) -> u8 {
        let d = self.local(p);
        let inplane = d[0] * d[0] + d[1] * d[1];
        let q_cavity = inplane / (self.cavity_r * self.cavity_r)
            + d[2] * d[2] / (self.cavity_z * self.cavity_z);
        if q_cavity <= 1.0 {
            return MASK_LV;
        }
        let q_outer =
            inplane / (self.outer_r * self.outer_r) + d[2] * d[2] / (self.outer_z * self.outer_z);
        if q_outer <= 1.0 {
            return MASK_MYOCARDIUM;
        }
        let q_rv: f64 = (0..3)
            .map(|i| {
                let e = (d[i] - self.rv_center[i]) / self.rv_r[i];
                e * e
            })
            .sum();
        if q_rv <= 1.0 {
            MASK_RV
        } else {
            MASK_BACKGROUND
        }
    }

    /// Axis-aligned extent `(lo, hi)` in mm.
    fn extent(&self) -> ([f64; 3], [f64; 3]) {
        let (c, s) = self.rotation;
        let rv = self.rv_center;
        let rv_world = [
            self.center[0] + c * rv[0] - s * rv[1],
            self.center[1] + s * rv[0] + c * rv[1],
            self.center[2] + rv[2],
        ];
        let (a, b) = (self.rv_r[0], self.rv_r[1]);
        let half = [
            ((a * c).powi(2) + (b * s).powi(2)).sqrt(),
            ((a * s).powi(2) + (b * c).powi(2)).sqrt(),
            self.rv_r[2],
        ];
        let lv_half = [self.outer_r, self.outer_r, self.outer_z];
        let lo = [0, 1, 2].map(|i| (self.center[i] - lv_half[i]).min(rv_world[i] - half[i]));
        let hi = [0, 1, 2].map(|i| (self.center[i] + lv_half[i]).max(rv_world[i] + half[i]));
        (lo, hi)
    }
}

/// Draw from N(mean, sd) truncated to mean ± 3 sd and kept above 10% of the mean.
fn draw_truncated(g: &Gaussian, rng: &mut impl Rng) -> f64 {
    if g.sd == 0.0 {
        return g.mean;
    }
    let dist = Normal::new(g.mean, g.sd).expect("sd checked nonnegative");
    let v: f64 = dist.sample(rng);
    v.clamp((g.mean - 3.0 * g.sd).max(0.1 * g.mean), g.mean + 3.0 * g.sd)
}

pub fn generate_center(
    profile: &CenterProfile,
    geometry: &PhantomGeometry,
    seed: u64,
) -> Result<CenterDataset> {
    profile.validate()?;
    let dims = [0, 1, 2].map(|i| {
        ((geometry.field_of_view_mm[i] / profile.spacing[i]).ceil() as usize).max(1)
    });
    let (nor, hcm) = profile.class_counts();
    let mut labels: Vec<ClassLabel> = std::iter::repeat_n(ClassLabel::Normal, nor)
        .chain(std::iter::repeat_n(ClassLabel::Hypertrophic, hcm))
        .collect();
    labels.shuffle(&mut seeding::stream(seed, &["labels", &profile.center_id]));

    let subjects = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let subject_id = format!("{}-s{:03}", profile.center_id, i);
            generate_subject(profile, geometry, dims, &subject_id, label, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CenterDataset {
        center_id: profile.center_id.clone(),
        subjects,
    })
}

fn generate_subject(
    profile: &CenterProfile,
    geometry: &PhantomGeometry,
    dims: [usize; 3],
    subject_id: &str,
    label: ClassLabel,
    seed: u64,
) -> Result<Subject> {
    let mut rng = seeding::stream(seed, &["subject", &profile.center_id, subject_id]);
    let span = [0, 1, 2].map(|i| (dims[i] - 1) as f64 * profile.spacing[i]);
    let jitter = geometry.center_jitter_mm;
    let center = [
        span[0] / 2.0 + rng.random_range(-jitter..=jitter),
        span[1] / 2.0 + rng.random_range(-jitter..=jitter),
        span[2] / 2.0,
    ];
    let cavity_r = draw_truncated(&geometry.cavity_radius_mm, &mut rng);
    let thickness_dist = match label {
        ClassLabel::Normal => &profile.myo_thickness_nor,
        ClassLabel::Hypertrophic => &profile.myo_thickness_hcm,
    };
    let thickness = draw_truncated(thickness_dist, &mut rng);
    let cf = geometry.contraction;
    let shapes = [
        (Timepoint::ED, Shape::new(center, profile.orientation_deg, cavity_r, thickness, geometry)),
        (
            Timepoint::ES,
            Shape::new(center, profile.orientation_deg, cavity_r * (1.0 - cf), thickness * (1.0 + cf), geometry),
        ),
    ];

    let mut volumes = Vec::with_capacity(2);
    for (timepoint, shape) in shapes {
        let (lo, hi) = shape.extent();
        if (0..3).any(|i| lo[i] < 0.0 || hi[i] > span[i]) {
            return Err(PhantomError::GeometryOutOfGrid {
                center: profile.center_id.clone(),
                subject: subject_id.to_string(),
                dims,
            });
        }
        let s = profile.spacing;
        let mask = Grid3::from_fn(dims, |x, y, z| {
            shape.classify([x as f64 * s[0], y as f64 * s[1], z as f64 * s[2]])
        });
        let noise = (profile.noise_sigma > 0.0)
            .then(|| Normal::new(0.0, profile.noise_sigma).expect("sigma checked"));
        let intensities = mask.map(|&m| {
            let base = match m {
                MASK_RV => geometry.base_rv,
                MASK_MYOCARDIUM => geometry.base_myocardium,
                MASK_LV => geometry.base_lv,
                _ => geometry.base_background,
            };
            let eps = noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
            profile.intensity_scale * base + profile.intensity_offset + eps
        });
        volumes.push(Volume {
            intensities,
            spacing: profile.spacing,
            mask,
            label,
            center_id: profile.center_id.clone(),
            subject_id: subject_id.to_string(),
            timepoint,
        });
    }
    let es = volumes.pop().expect("two timepoints");
    let ed = volumes.pop().expect("two timepoints");
    Ok(Subject {
        subject_id: subject_id.to_string(),
        label,
        ed,
        es,
    })
}
