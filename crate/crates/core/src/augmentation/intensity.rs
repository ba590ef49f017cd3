use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{BIAS_COEFFICIENT_RANGE, SPIKE_MAX_ENERGY_FRACTION};
use crate::grid::{Grid3, MultiChannel};

/// A single k-space spike (plus its conjugate, so the image stays real).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spike {
    pub frequency: [usize; 3],
    pub phase: f64,
    /// Energy of the added pattern relative to the channel energy.
    pub energy_fraction: f64,
}

impl Spike {
    pub fn random(dims: [usize; 3], rng: &mut impl Rng) -> Self {
        // kx in 1..nx/2 keeps k and -k distinct bins.
        let kx_max = ((dims[0].saturating_sub(1)) / 2).max(1);
        Self {
            frequency: [
                rng.random_range(1..=kx_max),
                rng.random_range(0..dims[1].max(1)),
                rng.random_range(0..dims[2].max(1)),
            ],
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            energy_fraction: SPIKE_MAX_ENERGY_FRACTION * (1.0 - rng.random::<f64>()),
        }
    }
}

/// In-place 3D DFT over an x-fastest buffer. Unnormalized in both directions.
fn fft3(data: &mut [Complex64], dims: [usize; 3], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let [nx, ny, nz] = dims;
    let strides = [1, nx, nx * ny];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        if n == 1 {
            continue;
        }
        let fft = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        let stride = strides[axis];
        let others: Vec<usize> = (0..nx * ny * nz)
            .filter(|&i| (i / stride) % n == 0)
            .collect();
        for start in others {
            line.clear();
            line.extend((0..n).map(|j| data[start + j * stride]));
            fft.process(&mut line);
            for (j, v) in line.iter().enumerate() {
                data[start + j * stride] = *v;
            }
        }
    }
}

/// Adds the spike in the frequency domain and returns the real part of the
/// inverse transform.
pub fn apply_spike(input: &MultiChannel, spike: &Spike) -> MultiChannel {
    input.map_channels(|g| {
        let dims = g.dims();
        let n = g.len();
        let energy: f64 = g.as_slice().iter().map(|v| v * v).sum();
        if energy == 0.0 {
            return g.clone();
        }
        let mut spectrum: Vec<Complex64> = g.as_slice().iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft3(&mut spectrum, dims, false);
        // A conjugate pair of amplitude A adds (2A/N) cos(.) in image space,
        // whose energy is 2 A^2 / N.
        let amplitude = (spike.energy_fraction * energy * n as f64 / 2.0).sqrt();
        let k = spike.frequency;
        let neg = [0, 1, 2].map(|a| (dims[a] - k[a] % dims[a]) % dims[a]);
        let idx = |p: [usize; 3]| p[0] + dims[0] * (p[1] + dims[1] * p[2]);
        let bump = Complex64::from_polar(amplitude, spike.phase);
        spectrum[idx([k[0] % dims[0], k[1] % dims[1], k[2] % dims[2]])] += bump;
        spectrum[idx(neg)] += bump.conj();
        fft3(&mut spectrum, dims, true);
        let scale = 1.0 / n as f64;
        Grid3::from_vec(dims, spectrum.iter().map(|c| c.re * scale).collect()).expect("same length")
    })
}

/// Multiplicative field `exp(Σ c_m · m(x, y, z))` over all monomials of
/// degree ≤ 3 in coordinates normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasField {
    /// `(a, b, c)` exponents and coefficient for `x^a y^b z^c`.
    pub terms: Vec<([u32; 3], f64)>,
}

impl BiasField {
    pub const DEGREE: u32 = 3;

    pub fn monomials() -> Vec<[u32; 3]> {
        let mut out = Vec::new();
        for a in 0..=Self::DEGREE {
            for b in 0..=Self::DEGREE - a {
                for c in 0..=Self::DEGREE - a - b {
                    out.push([a, b, c]);
                }
            }
        }
        out
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            terms: Self::monomials()
                .into_iter()
                .map(|m| (m, rng.random_range(-BIAS_COEFFICIENT_RANGE..=BIAS_COEFFICIENT_RANGE)))
                .collect(),
        }
    }

    pub fn field(&self, dims: [usize; 3]) -> Grid3<f64> {
        let norm = |v: usize, n: usize| if n <= 1 { 0.0 } else { 2.0 * v as f64 / (n - 1) as f64 - 1.0 };
        Grid3::from_fn(dims, |x, y, z| {
            let p = [norm(x, dims[0]), norm(y, dims[1]), norm(z, dims[2])];
            let s: f64 = self
                .terms
                .iter()
                .map(|(e, c)| c * p[0].powi(e[0] as i32) * p[1].powi(e[1] as i32) * p[2].powi(e[2] as i32))
                .sum();
            s.exp()
        })
    }
}

pub fn apply_bias_field(input: &MultiChannel, bias: &BiasField) -> MultiChannel {
    let field = bias.field(input.dims());
    input.map_channels(|g| g.zip_map(&field, |v, f| v * f))
}

/// Adds one N(0, sigma) field, shared by all channels.
pub fn add_noise(input: &MultiChannel, sigma: f64, seed: u64) -> MultiChannel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma is positive");
    let noise = Grid3::from_fn(input.dims(), |_, _, _| normal.sample(&mut rng));
    input.map_channels(|g| g.zip_map(&noise, |v, n| v + n))
}

/// Sign-preserving power: `sign(v) |v|^exponent`.
pub fn apply_gamma(input: &MultiChannel, exponent: f64) -> MultiChannel {
    input.map_channels(|g| g.map(|&v| v.signum() * v.abs().powf(exponent)))
}
