//! Privacy-preserving intensity standardization.
//!
//! Each center summarises its images as a [`HistogramAggregate`] (a sum of
//! mass-1 subject histograms plus a count). The server averages aggregates
//! into a [`ReferenceHistogram`] without ever seeing an image, and each image
//! is then mapped onto the reference with percentile-landmark matching and
//! rescaled to `[0, 1]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::min_max;
use crate::phantom::Volume;

#[derive(Debug, Error, PartialEq)]
pub enum HarmonizationError {
    #[error("no voxels selected in {0}")]
    EmptySelection(String),
    #[error("histogram bins differ between aggregates ({0})")]
    MismatchedBins(String),
    #[error("total sample count is zero")]
    ZeroSamples,
    #[error("bin edges must be at least two strictly increasing finite values")]
    InvalidEdges,
    #[error("reference histogram has fewer than two distinct landmarks")]
    DegenerateReference,
    #[error("image {0} is constant over the selected region")]
    ConstantImage(String),
}

pub type Result<T> = std::result::Result<T, HarmonizationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    WholeImage,
    /// Only voxels with a non-zero segmentation label.
    MaskOnly,
}

/// Percentiles used as matching landmarks.
pub const LANDMARK_PERCENTILES: [f64; 11] =
    [1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0];

pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Result<Vec<f64>> {
    if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(HarmonizationError::InvalidEdges);
    }
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|i| lo + i as f64 * width).collect();
    edges.push(hi);
    Ok(edges)
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2
        || edges.iter().any(|e| !e.is_finite())
        || edges.windows(2).any(|w| !(w[1] > w[0]))
    {
        return Err(HarmonizationError::InvalidEdges);
    }
    Ok(())
}

/// Values of `volume` inside `region`, in voxel order.
pub fn region_values(volume: &Volume, region: Region) -> Vec<f64> {
    match region {
        Region::WholeImage => volume.intensities.as_slice().to_vec(),
        Region::MaskOnly => volume
            .intensities
            .as_slice()
            .iter()
            .zip(volume.mask.as_slice())
            .filter(|(_, &m)| m != 0)
            .map(|(&v, _)| v)
            .collect(),
    }
}

/// `(min, max)` over the region, or `None` if nothing is selected.
pub fn region_bounds(volume: &Volume, region: Region) -> Option<(f64, f64)> {
    min_max(region_values(volume, region))
}

/// Bin index, with out-of-range values clamped into the first or last bin.
fn bin_of(edges: &[f64], v: f64) -> usize {
    let bins = edges.len() - 1;
    edges.partition_point(|&e| e <= v).saturating_sub(1).min(bins - 1)
}

/// Histogram of the selected voxels with total mass 1.
pub fn subject_histogram(volume: &Volume, region: Region, edges: &[f64]) -> Result<Vec<f64>> {
    check_edges(edges)?;
    let values = region_values(volume, region);
    if values.is_empty() {
        return Err(HarmonizationError::EmptySelection(volume.sample_key()));
    }
    let mut hist = vec![0.0; edges.len() - 1];
    for &v in &values {
        hist[bin_of(edges, v)] += 1.0;
    }
    let n = values.len() as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    Ok(hist)
}

/// One center's contribution to the reference: `Σ_n H_n` over its samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramAggregate {
    pub center_id: String,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<f64>,
    /// `N_k`.
    pub sample_count: usize,
}

impl HistogramAggregate {
    pub fn empty(center_id: impl Into<String>, bin_edges: Vec<f64>) -> Self {
        let bins = bin_edges.len().saturating_sub(1);
        Self {
            center_id: center_id.into(),
            bin_edges,
            counts: vec![0.0; bins],
            sample_count: 0,
        }
    }

    pub fn from_volumes<'a>(
        center_id: impl Into<String>,
        volumes: impl IntoIterator<Item = &'a Volume>,
        region: Region,
        bin_edges: &[f64],
    ) -> Result<Self> {
        check_edges(bin_edges)?;
        let mut agg = Self::empty(center_id, bin_edges.to_vec());
        for v in volumes {
            agg.add(&subject_histogram(v, region, bin_edges)?);
        }
        Ok(agg)
    }

    fn add(&mut self, hist: &[f64]) {
        for (c, h) in self.counts.iter_mut().zip(hist) {
            *c += h;
        }
        self.sample_count += 1;
    }

    /// Monoid merge: elementwise count sum, sample counts add.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.bin_edges != other.bin_edges {
            return Err(HarmonizationError::MismatchedBins(format!(
                "{} vs {}",
                self.center_id, other.center_id
            )));
        }
        Ok(Self {
            center_id: self.center_id.clone(),
            bin_edges: self.bin_edges.clone(),
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
            sample_count: self.sample_count + other.sample_count,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub percentile: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceHistogram {
    pub bin_edges: Vec<f64>,
    pub density: Vec<f64>,
    pub landmarks: Vec<Landmark>,
    /// Centers whose aggregates built this reference, sorted.
    pub contributors: Vec<String>,
}

impl ReferenceHistogram {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reference serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    pub fn landmark_values(&self) -> Vec<f64> {
        self.landmarks.iter().map(|l| l.value).collect()
    }

    pub fn max_bin_width(&self) -> f64 {
        self.bin_edges
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }
}

/// Inverse CDF of a binned density, linear within each bin.
pub fn density_percentile(edges: &[f64], density: &[f64], percentile: f64) -> f64 {
    let target = (percentile / 100.0).clamp(0.0, 1.0);
    let total: f64 = density.iter().sum();
    let mut cum = 0.0;
    for (i, &d) in density.iter().enumerate() {
        let mass = d / total;
        if mass > 0.0 && cum + mass >= target {
            let frac = ((target - cum) / mass).clamp(0.0, 1.0);
            return edges[i] + frac * (edges[i + 1] - edges[i]);
        }
        cum += mass;
    }
    edges[edges.len() - 1]
}

/// Reference density `(1/N) Σ_k Σ_n H_n^k`, renormalized to mass 1, and its
/// percentile landmarks. Every subject carries weight `1/N`.
pub fn average_histogram(aggregates: &[HistogramAggregate]) -> Result<ReferenceHistogram> {
    let first = aggregates.first().ok_or(HarmonizationError::ZeroSamples)?;
    check_edges(&first.bin_edges)?;
    let mut sorted: Vec<&HistogramAggregate> = aggregates.iter().collect();
    sorted.sort_by(|a, b| a.center_id.cmp(&b.center_id));
    for a in &sorted {
        if a.bin_edges != first.bin_edges || a.counts.len() != first.counts.len() {
            return Err(HarmonizationError::MismatchedBins(a.center_id.clone()));
        }
    }
    let n: usize = sorted.iter().map(|a| a.sample_count).sum();
    if n == 0 {
        return Err(HarmonizationError::ZeroSamples);
    }
    let bins = first.counts.len();
    let mut density = vec![0.0; bins];
    for a in &sorted {
        for (d, c) in density.iter_mut().zip(&a.counts) {
            *d += c;
        }
    }
    let mass: f64 = density.iter().sum();
    if !(mass > 0.0) {
        return Err(HarmonizationError::ZeroSamples);
    }
    density.iter_mut().for_each(|d| *d /= mass);
    let landmarks = LANDMARK_PERCENTILES
        .iter()
        .map(|&p| Landmark {
            percentile: p,
            value: density_percentile(&first.bin_edges, &density, p),
        })
        .collect();
    let mut contributors: Vec<String> = sorted.iter().map(|a| a.center_id.clone()).collect();
    contributors.dedup();
    Ok(ReferenceHistogram {
        bin_edges: first.bin_edges.clone(),
        density,
        landmarks,
        contributors,
    })
}

/// Linear-interpolated percentile of sorted values.
fn sorted_percentile(sorted: &[f64], percentile: f64) -> f64 {
    let pos = (percentile / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile landmarks of the image region at [`LANDMARK_PERCENTILES`].
pub fn image_landmarks(volume: &Volume, region: Region) -> Result<Vec<f64>> {
    let mut values = region_values(volume, region);
    if values.is_empty() {
        return Err(HarmonizationError::EmptySelection(volume.sample_key()));
    }
    values.sort_by(f64::total_cmp);
    Ok(LANDMARK_PERCENTILES
        .iter()
        .map(|&p| sorted_percentile(&values, p))
        .collect())
}

/// Monotone piecewise-linear map sending `src` landmarks onto `dst`.
/// Beyond the outer landmarks the outermost non-degenerate slope is extended.
struct LandmarkMap<'a> {
    src: &'a [f64],
    dst: &'a [f64],
    low_slope: f64,
    high_slope: f64,
}

impl<'a> LandmarkMap<'a> {
    fn new(src: &'a [f64], dst: &'a [f64]) -> Option<Self> {
        let last = src.len() - 1;
        let lo = src.iter().position(|&s| s > src[0])?;
        let hi = src.iter().rposition(|&s| s < src[last])?;
        Some(Self {
            src,
            dst,
            low_slope: (dst[lo] - dst[0]) / (src[lo] - src[0]),
            high_slope: (dst[last] - dst[hi]) / (src[last] - src[hi]),
        })
    }

    fn apply(&self, v: f64) -> f64 {
        let (s, d) = (self.src, self.dst);
        let last = s.len() - 1;
        if v <= s[0] {
            return d[0] + (v - s[0]) * self.low_slope;
        }
        if v >= s[last] {
            return d[last] + (v - s[last]) * self.high_slope;
        }
        let i = s.partition_point(|&x| x <= v) - 1;
        d[i] + (v - s[i]) * (d[i + 1] - d[i]) / (s[i + 1] - s[i])
    }
}

/// Maps the image's percentile landmarks onto the reference landmarks,
/// clamping results to the reference bin range. Under [`Region::MaskOnly`]
/// voxels outside the mask are set to zero.
pub fn match_histogram(volume: &Volume, reference: &ReferenceHistogram, region: Region) -> Result<Volume> {
    let dst = reference.landmark_values();
    if dst.first() == dst.last() {
        return Err(HarmonizationError::DegenerateReference);
    }
    let src = image_landmarks(volume, region)?;
    let map = LandmarkMap::new(&src, &dst)
        .ok_or_else(|| HarmonizationError::ConstantImage(volume.sample_key()))?;
    let lo = reference.bin_edges[0];
    let hi = reference.bin_edges[reference.bin_edges.len() - 1];
    let mut out = volume.clone();
    let mask = volume.mask.as_slice();
    for (i, v) in out.intensities.as_mut_slice().iter_mut().enumerate() {
        *v = if region == Region::MaskOnly && mask[i] == 0 {
            0.0
        } else {
            map.apply(*v).clamp(lo, hi)
        };
    }
    Ok(out)
}

/// Affine map of the region onto `[0, 1]`.
pub fn rescale_unit(volume: &Volume, region: Region) -> Result<Volume> {
    let (lo, hi) = region_bounds(volume, region)
        .ok_or_else(|| HarmonizationError::EmptySelection(volume.sample_key()))?;
    if !(hi > lo) {
        return Err(HarmonizationError::ConstantImage(volume.sample_key()));
    }
    let range = hi - lo;
    let mut out = volume.clone();
    let mask = volume.mask.as_slice();
    for (i, v) in out.intensities.as_mut_slice().iter_mut().enumerate() {
        *v = if region == Region::MaskOnly && mask[i] == 0 {
            0.0
        } else {
            (*v - lo) / range
        };
    }
    Ok(out)
}

/// Sum of absolute differences between two equally binned histograms.
pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid3;
    use crate::phantom::{ClassLabel, Timepoint};

    fn vol(values: Vec<f64>, mask: Vec<u8>) -> Volume {
        let n = values.len();
        Volume {
            intensities: Grid3::from_vec([n, 1, 1], values).unwrap(),
            spacing: [1.0; 3],
            mask: Grid3::from_vec([n, 1, 1], mask).unwrap(),
            label: ClassLabel::Normal,
            center_id: "c".into(),
            subject_id: "s".into(),
            timepoint: Timepoint::ED,
        }
    }

    fn ramp(n: usize) -> Volume {
        vol((0..n).map(|i| i as f64 / (n - 1) as f64).collect(), vec![1; n])
    }

    fn agg(id: &str, hists: &[Vec<f64>], edges: &[f64]) -> HistogramAggregate {
        let mut a = HistogramAggregate::empty(id, edges.to_vec());
        for h in hists {
            a.add(h);
        }
        a
    }

    #[test]
    fn constant_image_puts_mass_in_one_bin() {
        let edges = uniform_edges(0.0, 1.0, 4).unwrap();
        let h = subject_histogram(&vol(vec![0.6; 10], vec![1; 10]), Region::WholeImage, &edges).unwrap();
        assert_eq!(h, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn mask_only_needs_a_mask() {
        let edges = uniform_edges(0.0, 1.0, 4).unwrap();
        let v = vol(vec![0.5; 4], vec![0; 4]);
        assert!(matches!(
            subject_histogram(&v, Region::MaskOnly, &edges),
            Err(HarmonizationError::EmptySelection(_))
        ));
    }

    #[test]
    fn ramp_fills_bins_evenly() {
        let edges = uniform_edges(0.0, 1.0, 10).unwrap();
        let n = 1001;
        let h = subject_histogram(&ramp(n), Region::WholeImage, &edges).unwrap();
        // values on a bin edge may round into the lower bin
        let voxel = 1.0 / n as f64;
        for m in h {
            assert!((m - 0.1).abs() <= 2.0 * voxel + 1e-12, "{m}");
        }
    }

    #[test]
    fn averaging_weights_every_subject_equally() {
        let edges = vec![0.0, 0.5, 1.0];
        let two = [agg("a", &[vec![1.0, 0.0]], &edges), agg("b", &[vec![0.0, 1.0]], &edges)];
        assert_eq!(average_histogram(&two).unwrap().density, vec![0.5, 0.5]);

        let single = [agg("a", &[vec![1.0, 0.0], vec![0.5, 0.5]], &edges)];
        assert_eq!(average_histogram(&single).unwrap().density, vec![0.75, 0.25]);

        let unequal = [
            agg("a", &[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]], &edges),
            agg("b", &[vec![0.0, 1.0]], &edges),
        ];
        assert_eq!(average_histogram(&unequal).unwrap().density, vec![0.75, 0.25]);
    }

    #[test]
    fn averaging_errors() {
        let e1 = vec![0.0, 0.5, 1.0];
        let e2 = vec![0.0, 0.6, 1.0];
        assert!(matches!(
            average_histogram(&[agg("a", &[vec![1.0, 0.0]], &e1), agg("b", &[vec![1.0, 0.0]], &e2)]),
            Err(HarmonizationError::MismatchedBins(_))
        ));
        assert_eq!(
            average_histogram(&[HistogramAggregate::empty("a", e1)]).unwrap_err(),
            HarmonizationError::ZeroSamples
        );
    }

    #[test]
    fn merge_is_elementwise() {
        let e = vec![0.0, 0.5, 1.0];
        let m = agg("a", &[vec![1.0, 0.0]], &e).merge(&agg("a", &[vec![0.25, 0.75]], &e)).unwrap();
        assert_eq!(m.counts, vec![1.25, 0.75]);
        assert_eq!(m.sample_count, 2);
    }

    #[test]
    fn self_matching_is_near_identity() {
        let v = ramp(2001);
        let edges = uniform_edges(0.0, 1.0, 256).unwrap();
        let reference =
            average_histogram(&[HistogramAggregate::from_volumes("c", [&v], Region::WholeImage, &edges).unwrap()])
                .unwrap();
        let out = match_histogram(&v, &reference, Region::WholeImage).unwrap();
        let width = reference.max_bin_width();
        for (a, b) in out.intensities.as_slice().iter().zip(v.intensities.as_slice()) {
            assert!((a - b).abs() <= width, "{a} vs {b}");
        }
    }

    #[test]
    fn matched_landmarks_hit_reference() {
        let v = vol((0..3000).map(|i| ((i as f64) / 3000.0).powi(2) * 3.0 + 1.0).collect(), vec![1; 3000]);
        let target = ramp(3000);
        let edges = uniform_edges(0.0, 1.0, 256).unwrap();
        let reference = average_histogram(&[
            HistogramAggregate::from_volumes("t", [&target], Region::WholeImage, &edges).unwrap(),
        ])
        .unwrap();
        let out = match_histogram(&v, &reference, Region::WholeImage).unwrap();
        let got = image_landmarks(&out, Region::WholeImage).unwrap();
        for (g, r) in got.iter().zip(reference.landmark_values()) {
            assert!((g - r).abs() <= reference.max_bin_width(), "{g} vs {r}");
        }
    }

    #[test]
    fn matching_zeroes_outside_mask_and_is_monotone() {
        let values: Vec<f64> = (0..200).map(|i| ((i * 37) % 200) as f64 * 0.01 + 3.0).collect();
        let mask: Vec<u8> = (0..200).map(|i| u8::from(i % 5 != 0)).collect();
        let v = vol(values.clone(), mask.clone());
        let edges = uniform_edges(0.0, 1.0, 64).unwrap();
        let reference = average_histogram(&[
            HistogramAggregate::from_volumes("t", [&ramp(500)], Region::WholeImage, &edges).unwrap(),
        ])
        .unwrap();
        let out = match_histogram(&v, &reference, Region::MaskOnly).unwrap();
        let o = out.intensities.as_slice();
        for i in 0..200 {
            if mask[i] == 0 {
                assert_eq!(o[i], 0.0);
            }
            for j in 0..200 {
                if mask[i] != 0 && mask[j] != 0 && values[i] < values[j] {
                    assert!(o[i] <= o[j]);
                }
            }
        }
    }

    #[test]
    fn constant_image_cannot_be_matched() {
        let edges = uniform_edges(0.0, 1.0, 16).unwrap();
        let reference = average_histogram(&[
            HistogramAggregate::from_volumes("t", [&ramp(100)], Region::WholeImage, &edges).unwrap(),
        ])
        .unwrap();
        assert!(matches!(
            match_histogram(&vol(vec![0.3; 50], vec![1; 50]), &reference, Region::WholeImage),
            Err(HarmonizationError::ConstantImage(_))
        ));
    }

    #[test]
    fn rescale_cases() {
        let v = vol(vec![2.0, 4.0, 6.0], vec![1, 1, 1]);
        let r = rescale_unit(&v, Region::WholeImage).unwrap();
        assert_eq!(r.intensities.as_slice(), &[0.0, 0.5, 1.0]);
        assert_eq!(rescale_unit(&r, Region::WholeImage).unwrap(), r);
        let unit = vol(vec![0.0, 0.3, 1.0], vec![1, 1, 1]);
        assert_eq!(rescale_unit(&unit, Region::WholeImage).unwrap(), unit);
        assert!(rescale_unit(&vol(vec![1.0; 3], vec![1; 3]), Region::WholeImage).is_err());
        let masked = rescale_unit(&vol(vec![9.0, 2.0, 4.0], vec![0, 1, 1]), Region::MaskOnly).unwrap();
        assert_eq!(masked.intensities.as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn reference_json_round_trip() {
        let edges = uniform_edges(0.0, 1.0, 8).unwrap();
        let r = average_histogram(&[
            HistogramAggregate::from_volumes("t", [&ramp(64)], Region::WholeImage, &edges).unwrap(),
        ])
        .unwrap();
        assert_eq!(ReferenceHistogram::from_json(&r.to_json()).unwrap(), r);
    }
}
