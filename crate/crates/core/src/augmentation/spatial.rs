use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::grid::{Grid3, MultiChannel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    X,
    Y,
}

/// Mirror along x (horizontal) or y (vertical) in the axial plane.
pub fn flip(input: &MultiChannel, mask: &Grid3<u8>, axis: FlipAxis) -> (MultiChannel, Grid3<u8>) {
    let [nx, ny, _] = mask.dims();
    let src = |x: usize, y: usize| match axis {
        FlipAxis::X => (nx - 1 - x, y),
        FlipAxis::Y => (x, ny - 1 - y),
    };
    let out = input.map_channels(|g| {
        Grid3::from_fn(g.dims(), |x, y, z| {
            let (sx, sy) = src(x, y);
            *g.get(sx, sy, z)
        })
    });
    let out_mask = Grid3::from_fn(mask.dims(), |x, y, z| {
        let (sx, sy) = src(x, y);
        *mask.get(sx, sy, z)
    });
    (out, out_mask)
}

/// Coordinates this close to an integer are snapped onto it, so that exact
/// quarter and half turns move voxels without interpolation blur.
const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// In-plane rotation about the z axis through the grid centre. Voxels that map
/// from outside the grid read as zero.
pub fn rotate_z(input: &MultiChannel, mask: &Grid3<u8>, radians: f64) -> (MultiChannel, Grid3<u8>) {
    let [nx, ny, _] = mask.dims();
    let (cx, cy) = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0);
    let (s, c) = radians.sin_cos();
    // Inverse mapping: rotate output coordinates by -angle to find the source.
    let source = |x: usize, y: usize, z: usize| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        [snap(c * dx + s * dy + cx), snap(-s * dx + c * dy + cy), z as f64]
    };
    let out = input.map_channels(|g| Grid3::from_fn(g.dims(), |x, y, z| g.sample_linear(source(x, y, z), 0.0)));
    let out_mask = Grid3::from_fn(mask.dims(), |x, y, z| mask.sample_nearest(source(x, y, z)));
    (out, out_mask)
}

/// Displacements (in voxels) on a coarse control grid spanning the volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ElasticField {
    pub control_dims: [usize; 3],
    /// `[dx, dy, dz]` per control point, x-fastest.
    pub displacements: Vec<[f64; 3]>,
}

impl ElasticField {
    /// In-plane Gaussian displacements; the through-plane component is zero
    /// because slices are few and thick.
    pub fn random(control_dims: [usize; 3], sigma: f64, rng: &mut impl Rng) -> Self {
        let n = control_dims.iter().product();
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        let displacements = (0..n)
            .map(|_| [normal.sample(rng), normal.sample(rng), 0.0])
            .collect();
        Self {
            control_dims,
            displacements,
        }
    }

    pub fn zero(control_dims: [usize; 3]) -> Self {
        Self {
            control_dims,
            displacements: vec![[0.0; 3]; control_dims.iter().product()],
        }
    }

    fn at(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let [cx, cy, _] = self.control_dims;
        self.displacements[i + cx * (j + cy * k)]
    }
}

/// Catmull-Rom weights and clamped control indices for a voxel along one axis.
fn cubic_taps(voxel: usize, voxels: usize, controls: usize) -> [(usize, f64); 4] {
    if controls == 1 || voxels == 1 {
        return [(0, 1.0), (0, 0.0), (0, 0.0), (0, 0.0)];
    }
    let t = voxel as f64 * (controls - 1) as f64 / (voxels - 1) as f64;
    let i = (t.floor() as usize).min(controls - 2);
    let u = t - i as f64;
    let (u2, u3) = (u * u, u * u * u);
    let w = [
        0.5 * (-u3 + 2.0 * u2 - u),
        0.5 * (3.0 * u3 - 5.0 * u2 + 2.0),
        0.5 * (-3.0 * u3 + 4.0 * u2 + u),
        0.5 * (u3 - u2),
    ];
    let idx = |o: i64| (i as i64 + o).clamp(0, controls as i64 - 1) as usize;
    [(idx(-1), w[0]), (idx(0), w[1]), (idx(1), w[2]), (idx(2), w[3])]
}

/// Warps image and mask by the cubic-interpolated displacement field.
pub fn elastic(input: &MultiChannel, mask: &Grid3<u8>, field: &ElasticField) -> (MultiChannel, Grid3<u8>) {
    let dims = mask.dims();
    let taps: Vec<Vec<[(usize, f64); 4]>> = (0..3)
        .map(|a| (0..dims[a]).map(|v| cubic_taps(v, dims[a], field.control_dims[a])).collect())
        .collect();
    let sources = Grid3::from_fn(dims, |x, y, z| {
        let mut d = [0.0; 3];
        for &(k, wz) in &taps[2][z] {
            if wz == 0.0 {
                continue;
            }
            for &(j, wy) in &taps[1][y] {
                if wy == 0.0 {
                    continue;
                }
                for &(i, wx) in &taps[0][x] {
                    if wx == 0.0 {
                        continue;
                    }
                    let w = wx * wy * wz;
                    let c = field.at(i, j, k);
                    d[0] += w * c[0];
                    d[1] += w * c[1];
                    d[2] += w * c[2];
                }
            }
        }
        [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]]
    });
    let out = input.map_channels(|g| sources.map(|&p| g.sample_linear(p, 0.0)));
    let out_mask = sources.map(|&p| mask.sample_nearest(p));
    (out, out_mask)
}
