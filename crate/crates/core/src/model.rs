//! Small binary classifiers trained from scratch with plain SGD.
//!
//! Inputs are `channels × x × y × z` volumes, average-pooled by an integer
//! factor and flattened before reaching either a logistic head or a
//! one-hidden-layer tanh MLP with a sigmoid output. Parameters live in a flat
//! [`ParameterVector`], the only model representation that crosses a center
//! boundary.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::MultiChannel;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("parameter layout mismatch: expected {expected} ({expected_len} values), found {found} ({found_len} values)")]
    LayoutMismatch {
        expected: LayoutId,
        expected_len: usize,
        found: LayoutId,
        found_len: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch has {inputs} inputs but {labels} labels")]
    LabelCount { inputs: usize, labels: usize },
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u8),
    #[error("input shape {found:?} does not match model input shape {expected:?}")]
    InputShape { expected: [usize; 4], found: [usize; 4] },
    #[error("feature row has {found} values, model expects {expected}")]
    FeatureLength { expected: usize, found: usize },
    #[error("non-finite value produced at index {0}")]
    NonFinite(usize),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid trainer config: {0}")]
    InvalidTrainer(String),
    #[error("malformed parameter blob: {0}")]
    Decode(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Opaque 16-byte token naming the architecture a parameter vector belongs to.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayoutId(pub [u8; 16]);

impl LayoutId {
    /// Layout id for ad-hoc vectors that are not tied to a [`ModelSpec`].
    pub const RAW: LayoutId = LayoutId([0; 16]);
}

impl fmt::Display for LayoutId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0[..4] {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for LayoutId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LayoutId(")?;
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: LayoutId,
}

impl ParameterVector {
    /// Fails with [`ModelError::NonFinite`] if any value is NaN or infinite.
    pub fn new(values: Vec<f64>, layout: LayoutId) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(i));
        }
        Ok(Self { values, layout })
    }

    pub fn raw(values: Vec<f64>) -> Result<Self> {
        Self::new(values, LayoutId::RAW)
    }

    pub fn zeros(len: usize, layout: LayoutId) -> Self {
        Self {
            values: vec![0.0; len],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> LayoutId {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_compatible(&self, other_layout: LayoutId, other_len: usize) -> Result<()> {
        if self.layout != other_layout || self.values.len() != other_len {
            return Err(ModelError::LayoutMismatch {
                expected: self.layout,
                expected_len: self.values.len(),
                found: other_layout,
                found_len: other_len,
            });
        }
        Ok(())
    }

    /// `layout_id` (16 bytes) followed by little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.values.len());
        out.extend_from_slice(&self.layout.0);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || (bytes.len() - 16) % 8 != 0 {
            return Err(ModelError::Decode(format!(
                "length {} is not 16 + 8k",
                bytes.len()
            )));
        }
        let mut layout = [0u8; 16];
        layout.copy_from_slice(&bytes[..16]);
        let values = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::new(values, LayoutId(layout))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    layout: LayoutId,
}

impl GradientVector {
    pub fn new(values: Vec<f64>, layout: LayoutId) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(i));
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> LayoutId {
        self.layout
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// `(channels, x, y, z)` of the un-pooled input.
    pub input_shape: [usize; 4],
    #[serde(default)]
    pub hidden_width: usize,
    #[serde(default = "default_downsample")]
    pub downsample_factor: usize,
}

fn default_downsample() -> usize {
    1
}

impl ModelSpec {
    pub fn logistic(input_shape: [usize; 4], downsample_factor: usize) -> Self {
        Self {
            kind: ModelKind::Logistic,
            input_shape,
            hidden_width: 0,
            downsample_factor,
        }
    }

    pub fn mlp(input_shape: [usize; 4], hidden_width: usize, downsample_factor: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_shape,
            hidden_width,
            downsample_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(ModelError::InvalidSpec(format!(
                "input shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        if self.downsample_factor == 0 {
            return Err(ModelError::InvalidSpec("downsample_factor must be >= 1".into()));
        }
        if self.kind == ModelKind::Mlp && self.hidden_width == 0 {
            return Err(ModelError::InvalidSpec("mlp needs hidden_width >= 1".into()));
        }
        Ok(())
    }

    pub fn pooled_dims(&self) -> [usize; 3] {
        let f = self.downsample_factor;
        let [_, x, y, z] = self.input_shape;
        [x.div_ceil(f), y.div_ceil(f), z.div_ceil(f)]
    }

    /// Length of the flattened, pooled input.
    pub fn feature_len(&self) -> usize {
        let [px, py, pz] = self.pooled_dims();
        self.input_shape[0] * px * py * pz
    }

    pub fn parameter_len(&self) -> usize {
        let n = self.feature_len();
        match self.kind {
            ModelKind::Logistic => n + 1,
            ModelKind::Mlp => {
                let h = self.hidden_width;
                n * h + h + h + 1
            }
        }
    }

    pub fn layout_id(&self) -> LayoutId {
        let mut hasher = Sha256::new();
        let kind = match self.kind {
            ModelKind::Logistic => "logistic",
            ModelKind::Mlp => "mlp",
        };
        hasher.update(
            format!(
                "{kind}|{:?}|{}|{}",
                self.input_shape, self.hidden_width, self.downsample_factor
            )
            .as_bytes(),
        );
        let digest = hasher.finalize();
        let mut id = [0u8; 16];
        id.copy_from_slice(&digest[..16]);
        LayoutId(id)
    }

    fn check_params(&self, params: &ParameterVector) -> Result<()> {
        let expected = ParameterVector::zeros(0, self.layout_id());
        if params.layout() != self.layout_id() || params.len() != self.parameter_len() {
            return Err(ModelError::LayoutMismatch {
                expected: expected.layout(),
                expected_len: self.parameter_len(),
                found: params.layout(),
                found_len: params.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_iterations")]
    pub iterations_per_round: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_learning_rate() -> f64 {
    0.5
}
fn default_max_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    10
}
fn default_iterations() -> usize {
    7
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_learning_rate(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            iterations_per_round: default_iterations(),
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidTrainer(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.iterations_per_round == 0 {
            return Err(ModelError::InvalidTrainer(
                "max_epochs, patience and iterations_per_round must be >= 1".into(),
            ));
        }
        if self.patience > self.max_epochs {
            return Err(ModelError::InvalidTrainer(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Weights ~ N(0, 1/fan_in), biases zero.
pub fn init_parameters(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.feature_len();
    let mut values = Vec::with_capacity(spec.parameter_len());
    let mut draw = |fan_in: usize, count: usize, out: &mut Vec<f64>| {
        let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive sd");
        out.extend((0..count).map(|_| dist.sample(&mut rng)));
    };
    match spec.kind {
        ModelKind::Logistic => {
            draw(n, n, &mut values);
            values.push(0.0);
        }
        ModelKind::Mlp => {
            let h = spec.hidden_width;
            draw(n, n * h, &mut values);
            values.extend(std::iter::repeat_n(0.0, h));
            draw(h, h, &mut values);
            values.push(0.0);
        }
    }
    ParameterVector {
        values,
        layout: spec.layout_id(),
    }
}

/// Average-pools each channel by `downsample_factor` (edge blocks average the
/// voxels they actually cover) and flattens channel-major.
pub fn features(spec: &ModelSpec, input: &MultiChannel) -> Result<Vec<f64>> {
    if input.shape() != spec.input_shape {
        return Err(ModelError::InputShape {
            expected: spec.input_shape,
            found: input.shape(),
        });
    }
    let f = spec.downsample_factor;
    let [px, py, pz] = spec.pooled_dims();
    let [nx, ny, nz] = input.dims();
    let mut out = Vec::with_capacity(spec.feature_len());
    for grid in input.channels() {
        if f == 1 {
            out.extend_from_slice(grid.as_slice());
            continue;
        }
        let mut sums = vec![0.0; px * py * pz];
        let mut counts = vec![0u32; px * py * pz];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x / f + px * (y / f + py * (z / f));
                    sums[i] += grid.get(x, y, z);
                    counts[i] += 1;
                }
            }
        }
        out.extend(sums.iter().zip(&counts).map(|(s, &c)| s / c as f64));
    }
    Ok(out)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Largest double strictly below 1.
const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

fn to_probability(z: f64) -> f64 {
    sigmoid(z).clamp(f64::MIN_POSITIVE, ONE_MINUS)
}

/// BCE of `sigmoid(z)` against `y`, computed from the logit.
fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn check_rows<R: AsRef<[f64]>>(spec: &ModelSpec, rows: &[R]) -> Result<()> {
    let n = spec.feature_len();
    for r in rows {
        if r.as_ref().len() != n {
            return Err(ModelError::FeatureLength {
                expected: n,
                found: r.as_ref().len(),
            });
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logit for one feature row; for the MLP also returns the hidden activations.
fn logit(spec: &ModelSpec, p: &[f64], x: &[f64], hidden: &mut Vec<f64>) -> f64 {
    let n = x.len();
    match spec.kind {
        ModelKind::Logistic => dot(&p[..n], x) + p[n],
        ModelKind::Mlp => {
            let h = spec.hidden_width;
            let (w1, rest) = p.split_at(n * h);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(h);
            hidden.clear();
            hidden.extend((0..h).map(|j| (dot(&w1[j * n..(j + 1) * n], x) + b1[j]).tanh()));
            dot(w2, hidden) + b2[0]
        }
    }
}

pub fn forward_features<R: AsRef<[f64]>>(
    spec: &ModelSpec,
    params: &ParameterVector,
    rows: &[R],
) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    check_rows(spec, rows)?;
    let mut hidden = Vec::new();
    Ok(rows
        .iter()
        .map(|r| to_probability(logit(spec, params.values(), r.as_ref(), &mut hidden)))
        .collect())
}

/// Class-1 probabilities, each strictly inside `(0, 1)`.
pub fn forward(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &[MultiChannel],
) -> Result<Vec<f64>> {
    let rows = batch
        .iter()
        .map(|b| features(spec, b))
        .collect::<Result<Vec<_>>>()?;
    forward_features(spec, params, &rows)
}

fn check_labels(inputs: usize, labels: &[u8]) -> Result<()> {
    if inputs == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if inputs != labels.len() {
        return Err(ModelError::LabelCount {
            inputs,
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(ModelError::InvalidLabel(bad));
    }
    Ok(())
}

/// Mean binary cross-entropy over the batch.
pub fn loss_features<R: AsRef<[f64]>>(
    spec: &ModelSpec,
    params: &ParameterVector,
    rows: &[R],
    labels: &[u8],
) -> Result<f64> {
    spec.check_params(params)?;
    check_rows(spec, rows)?;
    check_labels(rows.len(), labels)?;
    let mut hidden = Vec::new();
    let total: f64 = rows
        .iter()
        .zip(labels)
        .map(|(r, &y)| bce_from_logit(logit(spec, params.values(), r.as_ref(), &mut hidden), y as f64))
        .sum();
    Ok(total / rows.len() as f64)
}

/// Gradient of the mean BCE, plus the loss itself.
pub fn loss_and_gradient_features<R: AsRef<[f64]>>(
    spec: &ModelSpec,
    params: &ParameterVector,
    rows: &[R],
    labels: &[u8],
) -> Result<(f64, GradientVector)> {
    spec.check_params(params)?;
    check_rows(spec, rows)?;
    check_labels(rows.len(), labels)?;
    let p = params.values();
    let n = spec.feature_len();
    let scale = 1.0 / rows.len() as f64;
    let mut grad = vec![0.0; p.len()];
    let mut hidden = Vec::new();
    let mut loss = 0.0;
    for (r, &y) in rows.iter().zip(labels) {
        let x = r.as_ref();
        let y = y as f64;
        let z = logit(spec, p, x, &mut hidden);
        loss += bce_from_logit(z, y);
        let dz = (sigmoid(z) - y) * scale;
        match spec.kind {
            ModelKind::Logistic => {
                for (g, xi) in grad[..n].iter_mut().zip(x) {
                    *g += dz * xi;
                }
                grad[n] += dz;
            }
            ModelKind::Mlp => {
                let h = spec.hidden_width;
                let w2 = &p[n * h + h..n * h + 2 * h];
                for j in 0..h {
                    let da = dz * w2[j] * (1.0 - hidden[j] * hidden[j]);
                    for (g, xi) in grad[j * n..(j + 1) * n].iter_mut().zip(x) {
                        *g += da * xi;
                    }
                    grad[n * h + j] += da;
                    grad[n * h + h + j] += dz * hidden[j];
                }
                grad[n * h + 2 * h] += dz;
            }
        }
    }
    let grad = GradientVector::new(grad, params.layout())?;
    Ok((loss * scale, grad))
}

pub fn gradient_features<R: AsRef<[f64]>>(
    spec: &ModelSpec,
    params: &ParameterVector,
    rows: &[R],
    labels: &[u8],
) -> Result<GradientVector> {
    loss_and_gradient_features(spec, params, rows, labels).map(|(_, g)| g)
}

pub fn gradient(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &[MultiChannel],
    labels: &[u8],
) -> Result<GradientVector> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let rows = batch
        .iter()
        .map(|b| features(spec, b))
        .collect::<Result<Vec<_>>>()?;
    gradient_features(spec, params, &rows, labels)
}

/// `params - learning_rate * grad`.
pub fn sgd_step(
    params: &ParameterVector,
    grad: &GradientVector,
    learning_rate: f64,
) -> Result<ParameterVector> {
    params.check_compatible(grad.layout(), grad.values().len())?;
    let values = params
        .values()
        .iter()
        .zip(grad.values())
        .map(|(w, g)| w - learning_rate * g)
        .collect();
    ParameterVector::new(values, params.layout())
}
