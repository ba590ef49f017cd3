//! Dense 3D grids and multi-channel volumes.
//!
//! Voxels are stored x-fastest: `index = x + nx * (y + ny * z)`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Clone> Grid3<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }
}

impl<T> Grid3<T> {
    /// Wraps `data`, which must hold exactly `dims[0] * dims[1] * dims[2]` voxels.
    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Option<Self> {
        (data.len() == dims[0] * dims[1] * dims[2]).then_some(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> &T {
        &self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize, z: usize) -> &mut T {
        let i = self.index(x, y, z);
        &mut self.data[i]
    }

    /// Signed lookup; `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64, z: i64) -> Option<&T> {
        if x < 0 || y < 0 || z < 0 {
            return None;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= self.dims[0] || y >= self.dims[1] || z >= self.dims[2] {
            return None;
        }
        Some(self.get(x, y, z))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn zip_map<U, V>(&self, other: &Grid3<U>, mut f: impl FnMut(&T, &U) -> V) -> Grid3<V> {
        assert_eq!(self.dims, other.dims, "grid shapes differ");
        Grid3 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| f(a, b))
                .collect(),
        }
    }
}

impl Grid3<f64> {
    /// Trilinear interpolation at a continuous voxel coordinate. Samples
    /// outside the grid read as `fill`.
    pub fn sample_linear(&self, p: [f64; 3], fill: f64) -> f64 {
        let base = [p[0].floor(), p[1].floor(), p[2].floor()];
        let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
        let b = [base[0] as i64, base[1] as i64, base[2] as i64];
        let mut acc = 0.0;
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            if wz == 0.0 {
                continue;
            }
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                if wy == 0.0 {
                    continue;
                }
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    if wx == 0.0 {
                        continue;
                    }
                    let v = self
                        .get_signed(b[0] + dx, b[1] + dy, b[2] + dz)
                        .copied()
                        .unwrap_or(fill);
                    acc += wx * wy * wz * v;
                }
            }
        }
        acc
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        min_max(self.data.iter().copied())
    }
}

impl<T: Copy + Default> Grid3<T> {
    /// Nearest-neighbour lookup; outside the grid reads as `T::default()`.
    pub fn sample_nearest(&self, p: [f64; 3]) -> T {
        self.get_signed(
            p[0].round() as i64,
            p[1].round() as i64,
            p[2].round() as i64,
        )
        .copied()
        .unwrap_or_default()
    }
}

pub(crate) fn min_max(values: impl IntoIterator<Item = f64>) -> Option<(f64, f64)> {
    values.into_iter().fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

/// A stack of equally shaped scalar grids: the `channels × x × y × z` model input.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannel {
    channels: Vec<Grid3<f64>>,
}

impl MultiChannel {
    pub fn new(channels: Vec<Grid3<f64>>) -> Option<Self> {
        let first = channels.first()?.dims();
        channels
            .iter()
            .all(|c| c.dims() == first)
            .then_some(Self { channels })
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.channels[0].dims()
    }

    /// `(channels, x, y, z)`.
    pub fn shape(&self) -> [usize; 4] {
        let d = self.dims();
        [self.channels.len(), d[0], d[1], d[2]]
    }

    pub fn channel(&self, c: usize) -> &Grid3<f64> {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Grid3<f64>] {
        &self.channels
    }

    pub fn map_channels(&self, f: impl FnMut(&Grid3<f64>) -> Grid3<f64>) -> Self {
        Self {
            channels: self.channels.iter().map(f).collect(),
        }
    }
}
