//! Training-time augmentation tiers.
//!
//! With probability `apply_probability` one transform is drawn uniformly from
//! the tier's pool and applied; otherwise the input passes through unchanged.
//! Spatial transforms move the mask with the image (nearest neighbour);
//! intensity transforms never touch the mask.

mod intensity;
mod spatial;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{Grid3, MultiChannel};

pub use intensity::{add_noise, apply_bias_field, apply_gamma, apply_spike, BiasField, Spike};
pub use spatial::{elastic, flip, rotate_z, ElasticField, FlipAxis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentationTier {
    None,
    Basic,
    Shape,
    ShapeIntensity,
}

impl AugmentationTier {
    pub const ALL: [AugmentationTier; 4] = [
        AugmentationTier::None,
        AugmentationTier::Basic,
        AugmentationTier::Shape,
        AugmentationTier::ShapeIntensity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentationTier::None => "none",
            AugmentationTier::Basic => "basic",
            AugmentationTier::Shape => "shape",
            AugmentationTier::ShapeIntensity => "shape-intensity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformId {
    Rotate,
    Hflip,
    Vflip,
    Elastic,
    Spike,
    BiasField,
    GaussianNoise,
    Gamma,
}

pub fn transform_pool(tier: AugmentationTier) -> Vec<TransformId> {
    use TransformId::*;
    match tier {
        AugmentationTier::None => vec![],
        AugmentationTier::Basic => vec![Rotate, Hflip, Vflip],
        AugmentationTier::Shape => vec![Rotate, Hflip, Vflip, Elastic],
        AugmentationTier::ShapeIntensity => {
            vec![Rotate, Hflip, Vflip, Elastic, Spike, BiasField, GaussianNoise, Gamma]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub tier: AugmentationTier,
    pub apply_probability: f64,
}

impl AugmentationPolicy {
    pub fn new(tier: AugmentationTier) -> Self {
        Self {
            tier,
            apply_probability: 0.5,
        }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.apply_probability)
    }
}

/// Sampled parameters of one transform.
#[derive(Debug, Clone, PartialEq)]
pub enum TransformParams {
    Rotate { degrees: f64 },
    Hflip,
    Vflip,
    Elastic(ElasticField),
    Spike(Spike),
    BiasField(BiasField),
    GaussianNoise { sigma: f64, seed: u64 },
    Gamma { exponent: f64 },
}

impl TransformParams {
    pub fn id(&self) -> TransformId {
        match self {
            TransformParams::Rotate { .. } => TransformId::Rotate,
            TransformParams::Hflip => TransformId::Hflip,
            TransformParams::Vflip => TransformId::Vflip,
            TransformParams::Elastic(_) => TransformId::Elastic,
            TransformParams::Spike(_) => TransformId::Spike,
            TransformParams::BiasField(_) => TransformId::BiasField,
            TransformParams::GaussianNoise { .. } => TransformId::GaussianNoise,
            TransformParams::Gamma { .. } => TransformId::Gamma,
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(
            self.id(),
            TransformId::Rotate | TransformId::Hflip | TransformId::Vflip | TransformId::Elastic
        )
    }
}

/// Record of what `augment` did.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSample {
    pub params: TransformParams,
    /// ChaCha word position of the stream before the transform was drawn.
    pub rng_word_pos: u128,
}

pub const MAX_ROTATION_DEGREES: f64 = 15.0;
pub const ELASTIC_CONTROL_GRID: [usize; 3] = [5, 5, 3];
pub const ELASTIC_SIGMA_VOXELS: f64 = 2.0;
pub const BIAS_COEFFICIENT_RANGE: f64 = 0.3;
pub const SPIKE_MAX_ENERGY_FRACTION: f64 = 0.1;
pub const NOISE_SIGMA_MAX: f64 = 0.25;
pub const GAMMA_RANGE: (f64, f64) = (0.7, 1.5);

pub fn sample_params(id: TransformId, dims: [usize; 3], rng: &mut impl Rng) -> TransformParams {
    match id {
        TransformId::Rotate => TransformParams::Rotate {
            degrees: rng.random_range(-MAX_ROTATION_DEGREES..=MAX_ROTATION_DEGREES),
        },
        TransformId::Hflip => TransformParams::Hflip,
        TransformId::Vflip => TransformParams::Vflip,
        TransformId::Elastic => {
            TransformParams::Elastic(ElasticField::random(ELASTIC_CONTROL_GRID, ELASTIC_SIGMA_VOXELS, rng))
        }
        TransformId::Spike => TransformParams::Spike(Spike::random(dims, rng)),
        TransformId::BiasField => TransformParams::BiasField(BiasField::random(rng)),
        TransformId::GaussianNoise => {
            // sigma ~ U(0, 0.25), excluding 0
            let sigma = NOISE_SIGMA_MAX * (1.0 - rng.random::<f64>());
            TransformParams::GaussianNoise {
                sigma,
                seed: rng.random(),
            }
        }
        TransformId::Gamma => {
            let (lo, hi) = (GAMMA_RANGE.0.ln(), GAMMA_RANGE.1.ln());
            TransformParams::Gamma {
                exponent: rng.random_range(lo..=hi).exp(),
            }
        }
    }
}

pub fn apply_params(
    params: &TransformParams,
    input: &MultiChannel,
    mask: &Grid3<u8>,
) -> (MultiChannel, Grid3<u8>) {
    match params {
        TransformParams::Rotate { degrees } => rotate_z(input, mask, degrees.to_radians()),
        TransformParams::Hflip => flip(input, mask, FlipAxis::X),
        TransformParams::Vflip => flip(input, mask, FlipAxis::Y),
        TransformParams::Elastic(field) => elastic(input, mask, field),
        TransformParams::Spike(spike) => (apply_spike(input, spike), mask.clone()),
        TransformParams::BiasField(field) => (apply_bias_field(input, field), mask.clone()),
        TransformParams::GaussianNoise { sigma, seed } => (add_noise(input, *sigma, *seed), mask.clone()),
        TransformParams::Gamma { exponent } => (apply_gamma(input, *exponent), mask.clone()),
    }
}

pub struct Augmented {
    pub input: MultiChannel,
    pub mask: Grid3<u8>,
    pub sample: Option<AugmentationSample>,
}

pub fn augment(
    input: &MultiChannel,
    mask: &Grid3<u8>,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Augmented {
    let pool = transform_pool(policy.tier);
    let identity = || Augmented {
        input: input.clone(),
        mask: mask.clone(),
        sample: None,
    };
    if pool.is_empty() || rng.random::<f64>() >= policy.apply_probability {
        return identity();
    }
    let rng_word_pos = rng.get_word_pos();
    let id = pool[rng.random_range(0..pool.len())];
    let params = sample_params(id, input.dims(), rng);
    let (out, out_mask) = apply_params(&params, input, mask);
    Augmented {
        input: out,
        mask: out_mask,
        sample: Some(AugmentationSample { params, rng_word_pos }),
    }
}
