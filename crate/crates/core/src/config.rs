//! TOML experiment configuration.
//!
//! ```toml
//! framework = ["cds", "fl", "fl-ev"]   # a single value or a list
//! scheme = "ccv"                        # ccv | lco
//! prior = "masked"                      # baseline | masked | per-structure
//! tier = "none"                         # none | basic | shape | shape-intensity
//! seeds = [0, 1, 2, 3, 4]
//! split_seed = 0
//! output_dir = "runs/ccv"
//!
//! [dataset]          # `dir = "..."` loads a generated tree instead
//! seed = 7
//!
//! [preprocess]
//! target_spacing = [2.5, 2.5, 10.0]
//! window = [32, 32, 8]
//!
//! [trainer]
//! learning_rate = 0.5
//!
//! [model]
//! kind = "logistic"
//! ```
//!
//! Unknown keys anywhere are errors.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentation::AugmentationTier;
use crate::evaluation::{ExperimentPlan, Framework, ModelConfig, PreprocessConfig, Scheme};
use crate::model::TrainerConfig;
use crate::phantom::io::read_dataset;
use crate::phantom::{default_profiles, generate_center, CenterDataset, CenterProfile, PhantomError, PhantomGeometry, Prior};

pub const SEED_ENV: &str = "FHSIM_SEED";
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Phantom(#[from] PhantomError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub seed: u64,
    /// A tree written by `fhsim gen`; relative to the config file.
    pub dir: Option<PathBuf>,
    /// Generator profiles; the built-in four centers when absent.
    pub centers: Option<Vec<CenterProfile>>,
    pub geometry: Option<PhantomGeometry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub framework: OneOrMany<Framework>,
    pub scheme: OneOrMany<Scheme>,
    pub prior: OneOrMany<Prior>,
    pub tier: OneOrMany<AugmentationTier>,
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub split_seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub model: ModelConfig,
}

/// Where the subjects come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Directory(PathBuf),
    Generated {
        seed: u64,
        profiles: Vec<CenterProfile>,
        geometry: PhantomGeometry,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Vec<CenterDataset>, ConfigError> {
        match self {
            DatasetSource::Directory(dir) => Ok(read_dataset(dir)?),
            DatasetSource::Generated { seed, profiles, geometry } => generate(profiles, geometry, *seed),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            DatasetSource::Directory(dir) => format!("dataset directory {}", dir.display()),
            DatasetSource::Generated { seed, profiles, .. } => format!(
                "generated dataset, seed {seed}, centers {}",
                profiles.iter().map(|p| format!("{} ({})", p.center_id, p.n_subjects)).collect::<Vec<_>>().join(", ")
            ),
        }
    }
}

pub fn generate(profiles: &[CenterProfile], geometry: &PhantomGeometry, seed: u64) -> Result<Vec<CenterDataset>, ConfigError> {
    let mut ids: Vec<&str> = profiles.iter().map(|p| p.center_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(ConfigError::Invalid("center ids must be unique".into()));
    }
    let mut out = profiles
        .par_iter()
        .map(|p| generate_center(p, geometry, seed))
        .collect::<Result<Vec<_>, _>>()?;
    out.sort_by(|a, b| a.center_id.cmp(&b.center_id));
    Ok(out)
}

pub fn parse_seed_list(s: &str) -> Result<Vec<u64>, ConfigError> {
    let seeds = s
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u64>().map_err(|e| ConfigError::Invalid(format!("{SEED_ENV}: {t:?}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if seeds.is_empty() {
        return Err(ConfigError::Invalid(format!("{SEED_ENV} holds no seeds")));
    }
    Ok(seeds)
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_string(),
            message: e.to_string().trim_end().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Resolves defaults and relative paths. `seed_override` (the value of
    /// `FHSIM_SEED`) replaces the seed list.
    pub fn resolve(&self, base_dir: &Path, seed_override: Option<&str>) -> Result<(ExperimentPlan, DatasetSource, PathBuf), ConfigError> {
        let seeds = match seed_override {
            Some(s) => parse_seed_list(s)?,
            None => self.seeds.clone().unwrap_or_else(|| DEFAULT_SEEDS.to_vec()),
        };
        let plan = ExperimentPlan {
            frameworks: self.framework.to_vec(),
            schemes: self.scheme.to_vec(),
            priors: self.prior.to_vec(),
            tiers: self.tier.to_vec(),
            seeds,
            split_seed: self.split_seed,
            preprocess: self.preprocess.clone(),
            trainer: self.trainer.clone(),
            model: self.model.clone(),
        };
        plan.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let d = &self.dataset;
        let source = match &d.dir {
            Some(dir) => {
                if d.centers.is_some() || d.geometry.is_some() {
                    return Err(ConfigError::Invalid("dataset.dir cannot be combined with dataset.centers or dataset.geometry".into()));
                }
                DatasetSource::Directory(base_dir.join(dir))
            }
            None => DatasetSource::Generated {
                seed: d.seed,
                profiles: d.centers.clone().unwrap_or_else(default_profiles),
                geometry: d.geometry.clone().unwrap_or_default(),
            },
        };
        Ok((plan, source, base_dir.join(&self.output_dir)))
    }
}

/// Generator input for `fhsim gen --profiles`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileFile {
    pub centers: Vec<CenterProfile>,
    pub geometry: Option<PhantomGeometry>,
}

impl ProfileFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string().trim_end().to_string(),
        })
    }
}
