//! Sliding-window patch aggregation and softmax ensembling.
//!
//! The network itself is out of scope: anything implementing [`PatchScorer`]
//! can be plugged into [`sliding_window_predict`]. Patches are scored in
//! parallel batches and accumulated in tile order, so the result does not
//! depend on thread scheduling.

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ProbVolume, ScalarVolume, NORMALIZATION_TOLERANCE};

/// Lower bound on Gaussian importance weights.
pub const MIN_GAUSSIAN_WEIGHT: f32 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidingWindowConfig {
    /// (z, y, x) voxels.
    pub patch_size: [usize; 3],
    #[serde(default = "default_step")]
    pub step_fraction: f64,
    #[serde(default = "default_true")]
    pub gaussian_weighting: bool,
    /// Per-axis sigma as a fraction of the patch size.
    #[serde(default = "default_sigma")]
    pub gaussian_sigma_fraction: f64,
}

fn default_step() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

fn default_sigma() -> f64 {
    0.125
}

impl SlidingWindowConfig {
    pub fn new(patch_size: [usize; 3]) -> Self {
        SlidingWindowConfig {
            patch_size,
            step_fraction: default_step(),
            gaussian_weighting: true,
            gaussian_sigma_fraction: default_sigma(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size.iter().any(|&p| p == 0) {
            return Err(Error::InvalidConfig(format!(
                "patch size {:?} has an empty axis",
                self.patch_size
            )));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "step fraction {} outside (0, 1]",
                self.step_fraction
            )));
        }
        if self.gaussian_weighting && !(self.gaussian_sigma_fraction > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gaussian sigma fraction {} must be positive",
                self.gaussian_sigma_fraction
            )));
        }
        Ok(())
    }
}

/// Where a patch sits relative to the unpadded image (may be negative when
/// the image is smaller than the patch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchContext {
    pub origin: [isize; 3],
}

/// Produces per-class softmax scores for one image patch.
pub trait PatchScorer: Sync {
    fn num_classes(&self) -> usize;

    /// Returns scores shaped (classes, pz, py, px) matching `patch`.
    fn score(&self, patch: ArrayView3<'_, f32>, ctx: PatchContext) -> Result<Array4<f32>>;
}

fn axis_positions(extent: usize, patch: usize, step_fraction: f64) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let target_step = patch as f64 * step_fraction;
    let steps = ((extent - patch) as f64 / target_step).ceil() as usize + 1;
    let actual = (extent - patch) as f64 / (steps - 1) as f64;
    (0..steps).map(|i| (i as f64 * actual).round() as usize).collect()
}

/// Patch origins covering `shape` (already padded to at least the patch size),
/// in z-major order. Per axis the first origin is 0, the last is
/// `extent - patch`, and consecutive origins are evenly spread no further than
/// `ceil(patch · step_fraction)` apart.
pub fn tile_positions(shape: [usize; 3], cfg: &SlidingWindowConfig) -> Vec<[usize; 3]> {
    let per_axis: Vec<Vec<usize>> = (0..3)
        .map(|a| axis_positions(shape[a], cfg.patch_size[a], cfg.step_fraction))
        .collect();
    let mut out = Vec::with_capacity(per_axis.iter().map(Vec::len).product());
    for &z in &per_axis[0] {
        for &y in &per_axis[1] {
            for &x in &per_axis[2] {
                out.push([z, y, x]);
            }
        }
    }
    out
}

/// Separable Gaussian importance map peaking at 1 in the patch centre.
pub fn gaussian_weights(patch: [usize; 3], sigma_fraction: f64) -> Array3<f32> {
    let axis = |n: usize| -> Vec<f64> {
        let sigma = n as f64 * sigma_fraction;
        let center = (n as f64 - 1.0) / 2.0;
        let w: Vec<f64> = (0..n)
            .map(|i| {
                let d = i as f64 - center;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let max = w.iter().cloned().fold(f64::MIN, f64::max);
        w.into_iter().map(|v| v / max).collect()
    };
    let (wz, wy, wx) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    Array3::from_shape_fn(patch, |(z, y, x)| {
        ((wz[z] * wy[y] * wx[x]) as f32).max(MIN_GAUSSIAN_WEIGHT)
    })
}

fn check_scores(scores: &Array4<f32>, classes: usize, patch: [usize; 3], ctx: PatchContext) -> Result<()> {
    let expected = [classes, patch[0], patch[1], patch[2]];
    if scores.shape() != expected {
        return Err(Error::InvalidVolume(format!(
            "scorer returned shape {:?}, expected {expected:?}",
            scores.shape()
        )));
    }
    let sums = scores.sum_axis(Axis(0));
    if let Some(&sum) = sums.iter().find(|s| !((**s - 1.0).abs() <= NORMALIZATION_TOLERANCE)) {
        return Err(Error::UnnormalizedScores { sum, origin: ctx.origin });
    }
    Ok(())
}

/// Weighted average of overlapping patch scores over the whole image.
pub fn sliding_window_predict(
    image: &ScalarVolume,
    scorer: &dyn PatchScorer,
    cfg: &SlidingWindowConfig,
) -> Result<ProbVolume> {
    cfg.validate()?;
    let classes = scorer.num_classes();
    if classes == 0 {
        return Err(Error::InvalidConfig("scorer reports zero classes".into()));
    }
    let shape = image.geometry().shape();
    let patch = cfg.patch_size;
    let padded: [usize; 3] = std::array::from_fn(|a| shape[a].max(patch[a]));
    let pad_before: [usize; 3] = std::array::from_fn(|a| (padded[a] - shape[a]) / 2);

    let mut canvas = Array3::<f32>::zeros(padded);
    canvas
        .slice_mut(s![
            pad_before[0]..pad_before[0] + shape[0],
            pad_before[1]..pad_before[1] + shape[1],
            pad_before[2]..pad_before[2] + shape[2]
        ])
        .assign(image.data());

    let weights = if cfg.gaussian_weighting {
        gaussian_weights(patch, cfg.gaussian_sigma_fraction)
    } else {
        Array3::ones(patch)
    };

    // f64 accumulation keeps heavily overlapped voxels exact to f32 output precision
    let mut acc = Array4::<f64>::zeros((classes, padded[0], padded[1], padded[2]));
    let mut weight_sum = Array3::<f64>::zeros(padded);
    let positions = tile_positions(padded, cfg);
    let batch = rayon::current_num_threads().max(1) * 2;

    for chunk in positions.chunks(batch) {
        let scored: Vec<Array4<f32>> = chunk
            .par_iter()
            .map(|&o| {
                let view = canvas.slice(s![o[0]..o[0] + patch[0], o[1]..o[1] + patch[1], o[2]..o[2] + patch[2]]);
                let ctx = PatchContext {
                    origin: std::array::from_fn(|a| o[a] as isize - pad_before[a] as isize),
                };
                let scores = scorer.score(view, ctx)?;
                check_scores(&scores, classes, patch, ctx)?;
                Ok(scores)
            })
            .collect::<Result<_>>()?;
        for (o, scores) in chunk.iter().zip(scored) {
            let region = s![o[0]..o[0] + patch[0], o[1]..o[1] + patch[1], o[2]..o[2] + patch[2]];
            weight_sum.slice_mut(region).zip_mut_with(&weights, |a, &w| *a += w as f64);
            for c in 0..classes {
                let mut dst = acc.index_axis_mut(Axis(0), c);
                let mut dst = dst.slice_mut(region);
                ndarray::Zip::from(&mut dst)
                    .and(scores.index_axis(Axis(0), c))
                    .and(&weights)
                    .for_each(|a, &p, &w| *a += p as f64 * w as f64);
            }
        }
    }

    let crop = s![
        ..,
        pad_before[0]..pad_before[0] + shape[0],
        pad_before[1]..pad_before[1] + shape[1],
        pad_before[2]..pad_before[2] + shape[2]
    ];
    let mut probs = acc.slice(crop).to_owned();
    let wsum = weight_sum.slice(s![
        pad_before[0]..pad_before[0] + shape[0],
        pad_before[1]..pad_before[1] + shape[1],
        pad_before[2]..pad_before[2] + shape[2]
    ]);
    for mut class in probs.axis_iter_mut(Axis(0)) {
        class.zip_mut_with(&wsum, |p, &w| *p /= w);
    }
    ProbVolume::new(image.geometry().clone(), probs.mapv(|p| p as f32))
}

/// Voxel- and class-wise arithmetic mean of model outputs.
pub fn ensemble_average(members: &[ProbVolume]) -> Result<ProbVolume> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidConfig("ensemble needs at least one member".into()))?;
    for m in &members[1..] {
        first.geometry().ensure_compatible(m.geometry(), 1e-6)?;
        if m.num_classes() != first.num_classes() {
            return Err(Error::GeometryMismatch(format!(
                "ensemble members have {} and {} classes",
                first.num_classes(),
                m.num_classes()
            )));
        }
    }
    let n = members.len() as f64;
    let slices: Vec<&[f32]> = members.iter().map(|m| m.as_slice()).collect();
    let mut out = vec![0f32; slices[0].len()];
    out.par_chunks_mut(1 << 16).enumerate().for_each(|(chunk, dst)| {
        let base = chunk << 16;
        for (i, d) in dst.iter_mut().enumerate() {
            let sum: f64 = slices.iter().map(|s| s[base + i] as f64).sum();
            *d = (sum / n) as f32;
        }
    });
    let [z, y, x] = first.geometry().shape();
    let grid = Array4::from_shape_vec((first.num_classes(), z, y, x), out).expect("shape matches");
    ProbVolume::new(first.geometry().clone(), grid)
}

/// Replays a precomputed probability volume; patch voxels outside the volume
/// take the value of the nearest edge voxel.
pub struct LookupScorer {
    probs: ProbVolume,
}

impl LookupScorer {
    pub fn new(probs: ProbVolume) -> Self {
        LookupScorer { probs }
    }
}

impl PatchScorer for LookupScorer {
    fn num_classes(&self) -> usize {
        self.probs.num_classes()
    }

    fn score(&self, patch: ArrayView3<'_, f32>, ctx: PatchContext) -> Result<Array4<f32>> {
        let [pz, py, px] = [patch.shape()[0], patch.shape()[1], patch.shape()[2]];
        let shape = self.probs.geometry().shape();
        let clamp = |a: usize, i: usize| -> usize {
            (ctx.origin[a] + i as isize).clamp(0, shape[a] as isize - 1) as usize
        };
        let src = self.probs.probs();
        Ok(Array4::from_shape_fn((self.num_classes(), pz, py, px), |(c, z, y, x)| {
            src[[c, clamp(0, z), clamp(1, y), clamp(2, x)]]
        }))
    }
}

/// Intensity band mapped to a class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityBand {
    pub low: f32,
    pub high: f32,
    pub class: usize,
}

/// Assigns `confidence` to the class whose band contains the intensity
/// (background when none does) and spreads the rest evenly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScorer {
    pub num_classes: usize,
    pub bands: Vec<IntensityBand>,
    pub confidence: f32,
}

impl ThresholdScorer {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("threshold scorer needs at least two classes".into()));
        }
        if !(self.confidence > 0.0 && self.confidence <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "confidence {} outside (0, 1]",
                self.confidence
            )));
        }
        if let Some(b) = self.bands.iter().find(|b| b.class >= self.num_classes || !(b.low < b.high)) {
            return Err(Error::InvalidConfig(format!("invalid intensity band {b:?}")));
        }
        Ok(())
    }

    fn class_of(&self, v: f32) -> usize {
        self.bands
            .iter()
            .find(|b| v >= b.low && v < b.high)
            .map_or(0, |b| b.class)
    }
}

impl PatchScorer for ThresholdScorer {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn score(&self, patch: ArrayView3<'_, f32>, _ctx: PatchContext) -> Result<Array4<f32>> {
        self.validate()?;
        let rest = (1.0 - self.confidence) / (self.num_classes - 1) as f32;
        let [pz, py, px] = [patch.shape()[0], patch.shape()[1], patch.shape()[2]];
        let classes = patch.mapv(|v| self.class_of(v));
        Ok(Array4::from_shape_fn((self.num_classes, pz, py, px), |(c, z, y, x)| {
            if classes[[z, y, x]] == c {
                self.confidence
            } else {
                rest
            }
        }))
    }
}
