use serde::{Deserialize, Serialize};

use super::{PhantomError, Result, Volume, MASK_LV, MASK_MYOCARDIUM, MASK_RV};
use crate::grid::{Grid3, MultiChannel};

/// Anatomical prior injected into the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Prior {
    /// Raw intensities, replicated to three channels.
    Baseline,
    /// Intensities multiplied by the binary heart mask, replicated to three channels.
    Masked,
    /// One channel per structure: RV, myocardium, LV.
    PerStructure,
}

impl Prior {
    pub const ALL: [Prior; 3] = [Prior::Baseline, Prior::Masked, Prior::PerStructure];

    pub fn as_str(self) -> &'static str {
        match self {
            Prior::Baseline => "baseline",
            Prior::Masked => "masked",
            Prior::PerStructure => "per-structure",
        }
    }
}

/// Resamples onto `target_spacing` (mm). Output voxel `i` sits at
/// `i * target_spacing` mm, the same physical origin as the source. Intensities
/// are trilinear with edge clamping; the mask uses nearest neighbour.
pub fn resample(volume: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    if target_spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(PhantomError::InvalidSpacing(target_spacing));
    }
    if volume.spacing == target_spacing {
        return Ok(volume.clone());
    }
    let src = volume.dims();
    let dims = [0, 1, 2].map(|i| {
        ((src[i] as f64 * volume.spacing[i] / target_spacing[i]).round() as usize).max(1)
    });
    let ratio = [0, 1, 2].map(|i| target_spacing[i] / volume.spacing[i]);
    let source_coord = |x: usize, y: usize, z: usize| {
        let v = [x, y, z];
        [0, 1, 2].map(|i| (v[i] as f64 * ratio[i]).clamp(0.0, (src[i] - 1) as f64))
    };
    let intensities = Grid3::from_fn(dims, |x, y, z| {
        volume.intensities.sample_linear(source_coord(x, y, z), 0.0)
    });
    let mask = Grid3::from_fn(dims, |x, y, z| volume.mask.sample_nearest(source_coord(x, y, z)));
    Ok(Volume {
        intensities,
        spacing: target_spacing,
        mask,
        ..volume.clone_meta()
    })
}

impl Volume {
    fn clone_meta(&self) -> Volume {
        Volume {
            intensities: Grid3::filled([0, 0, 0], 0.0),
            spacing: self.spacing,
            mask: Grid3::filled([0, 0, 0], 0),
            label: self.label,
            center_id: self.center_id.clone(),
            subject_id: self.subject_id.clone(),
            timepoint: self.timepoint,
        }
    }
}

/// Per-axis `floor((min + max) / 2)` of the non-zero mask bounding box.
pub fn mask_bbox_center(mask: &Grid3<u8>) -> Option<[usize; 3]> {
    let [nx, ny, nz] = mask.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if *mask.get(x, y, z) != 0 {
                    any = true;
                    for (i, v) in [x, y, z].into_iter().enumerate() {
                        lo[i] = lo[i].min(v);
                        hi[i] = hi[i].max(v);
                    }
                }
            }
        }
    }
    any.then(|| [0, 1, 2].map(|i| (lo[i] + hi[i]) / 2))
}

/// Extracts a `window`-sized block whose voxel `window / 2` is the mask
/// bounding-box centre. Voxels outside the source read as zero.
pub fn crop(volume: &Volume, window: [usize; 3]) -> Result<Volume> {
    let center = mask_bbox_center(&volume.mask)
        .ok_or_else(|| PhantomError::EmptyMask(volume.sample_key()))?;
    let start = [0, 1, 2].map(|i| center[i] as i64 - (window[i] / 2) as i64);
    let intensities = Grid3::from_fn(window, |x, y, z| {
        volume
            .intensities
            .get_signed(start[0] + x as i64, start[1] + y as i64, start[2] + z as i64)
            .copied()
            .unwrap_or(0.0)
    });
    let mask = Grid3::from_fn(window, |x, y, z| {
        volume
            .mask
            .get_signed(start[0] + x as i64, start[1] + y as i64, start[2] + z as i64)
            .copied()
            .unwrap_or(0)
    });
    Ok(Volume {
        intensities,
        mask,
        ..volume.clone_meta()
    })
}

/// Builds the three-channel network input for `prior`.
pub fn induce_prior(volume: &Volume, prior: Prior) -> MultiChannel {
    let img = &volume.intensities;
    let keep = |pred: &dyn Fn(u8) -> bool| img.zip_map(&volume.mask, |v, &m| if pred(m) { *v } else { 0.0 });
    let channels = match prior {
        Prior::Baseline => vec![img.clone(); 3],
        Prior::Masked => vec![keep(&|m| m != 0); 3],
        Prior::PerStructure => vec![
            keep(&|m| m == MASK_RV),
            keep(&|m| m == MASK_MYOCARDIUM),
            keep(&|m| m == MASK_LV),
        ],
    };
    MultiChannel::new(channels).expect("channels share the volume shape")
}
