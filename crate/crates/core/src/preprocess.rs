//! Intensity normalization and resampling to a target spacing.

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelVolume, ScalarVolume};

/// Percentiles of pooled foreground intensity used as CT clipping bounds.
pub const CT_CLIP_PERCENTILES: (f64, f64) = (0.5, 99.5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum NormalizationScheme {
    /// Clip to dataset foreground percentiles, then standardize with the
    /// dataset foreground mean and std.
    #[serde(rename = "CT")]
    Ct {
        ct_clip_low: f64,
        ct_clip_high: f64,
        ct_mean: f64,
        ct_std: f64,
    },
    /// Per-image standardization over all voxels.
    ZScore,
}

impl NormalizationScheme {
    pub fn validate(&self) -> Result<()> {
        if let NormalizationScheme::Ct {
            ct_clip_low,
            ct_clip_high,
            ct_mean,
            ct_std,
        } = *self
        {
            if !(ct_clip_low < ct_clip_high) {
                return Err(Error::InvalidConfig(format!(
                    "CT clip bounds [{ct_clip_low}, {ct_clip_high}] are not increasing"
                )));
            }
            if !(ct_std > 0.0 && ct_std.is_finite() && ct_mean.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "CT mean/std ({ct_mean}, {ct_std}) invalid"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// (z, y, x) in mm.
    pub target_spacing: [f64; 3],
    pub scheme: NormalizationScheme,
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "target spacing {:?} must be positive",
                self.target_spacing
            )));
        }
        self.scheme.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PreprocessConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Linear-interpolation percentile (`p` in 0..=100) of ascending `sorted`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let pos = (p / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let (sum, n) = values.clone().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt(), n)
}

/// Derives CT normalization from the foreground voxels (mask label ≠ 0) of a
/// dataset.
pub fn compute_ct_stats(images: &[ScalarVolume], masks: &[LabelVolume]) -> Result<NormalizationScheme> {
    if images.is_empty() || images.len() != masks.len() {
        return Err(Error::InvalidConfig(format!(
            "{} images with {} masks",
            images.len(),
            masks.len()
        )));
    }
    let mut values = Vec::new();
    for (img, mask) in images.iter().zip(masks) {
        img.geometry().ensure_compatible(mask.geometry(), 1e-3)?;
        values.extend(
            img.as_slice()
                .iter()
                .zip(mask.as_slice())
                .filter(|(_, &m)| m != 0)
                .map(|(&v, _)| v as f64),
        );
    }
    if values.is_empty() {
        return Err(Error::Degenerate("no foreground voxels for CT statistics".into()));
    }
    values.sort_unstable_by(f64::total_cmp);
    let low = percentile(&values, CT_CLIP_PERCENTILES.0);
    let high = percentile(&values, CT_CLIP_PERCENTILES.1);
    let (mean, std, _) = mean_std(values.iter().map(|v| v.clamp(low, high)));
    if !(std > 0.0) || !(low < high) {
        return Err(Error::Degenerate(
            "foreground intensities are constant (std = 0)".into(),
        ));
    }
    Ok(NormalizationScheme::Ct {
        ct_clip_low: low,
        ct_clip_high: high,
        ct_mean: mean,
        ct_std: std,
    })
}

pub fn normalize(image: &ScalarVolume, scheme: &NormalizationScheme) -> Result<ScalarVolume> {
    scheme.validate()?;
    let (shift, scale, clip) = match *scheme {
        NormalizationScheme::Ct {
            ct_clip_low,
            ct_clip_high,
            ct_mean,
            ct_std,
        } => (ct_mean, ct_std, Some((ct_clip_low, ct_clip_high))),
        NormalizationScheme::ZScore => {
            let (mean, std, _) = mean_std(image.as_slice().iter().map(|&v| v as f64));
            if !(std > 0.0) {
                return Err(Error::Degenerate("constant image cannot be z-scored".into()));
            }
            (mean, std, None)
        }
    };
    let data = image.data().mapv(|v| {
        let v = v as f64;
        let v = match clip {
            Some((lo, hi)) => v.clamp(lo, hi),
            None => v,
        };
        ((v - shift) / scale) as f32
    });
    ScalarVolume::new(image.geometry().clone(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMode {
    Nearest,
    Trilinear,
}

/// Output shape: round-half-away-from-zero of the physical extent in target
/// voxels, at least one per axis.
pub fn resampled_shape(shape: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    std::array::from_fn(|a| ((shape[a] as f64 * spacing[a] / target[a]).round() as usize).max(1))
}

fn target_geometry(geometry: &Geometry, target: [f64; 3]) -> Result<Geometry> {
    if target.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::InvalidConfig(format!(
            "target spacing {target:?} must be positive"
        )));
    }
    let shape = resampled_shape(geometry.shape(), geometry.spacing(), target);
    geometry.clone().with_shape(shape)?.with_spacing(target)
}

/// Output voxel `o` sits at physical offset `o · target` from the shared
/// origin, i.e. at continuous source index `o · target / source`; samples
/// outside the source grid clamp to the edge voxel.
fn source_coords(out_n: usize, in_n: usize, ratio: f64) -> Vec<(usize, usize, f64)> {
    (0..out_n)
        .map(|o| {
            let c = (o as f64 * ratio).clamp(0.0, (in_n - 1) as f64);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(in_n - 1);
            (i0, i1, c - i0 as f64)
        })
        .collect()
}

fn nearest_coords(out_n: usize, in_n: usize, ratio: f64) -> Vec<usize> {
    (0..out_n)
        .map(|o| ((o as f64 * ratio + 0.5).floor() as usize).min(in_n - 1))
        .collect()
}

fn ratios(from: &Geometry, to: &Geometry) -> [f64; 3] {
    std::array::from_fn(|a| to.spacing()[a] / from.spacing()[a])
}

fn resample_nearest<T: Copy + Send + Sync + Default>(
    src: &[T],
    from: &Geometry,
    to: &Geometry,
) -> Vec<T> {
    let [iz, iy, ix] = from.shape();
    let [oz, oy, ox] = to.shape();
    let r = ratios(from, to);
    let zs = nearest_coords(oz, iz, r[0]);
    let ys = nearest_coords(oy, iy, r[1]);
    let xs = nearest_coords(ox, ix, r[2]);
    let mut out = vec![T::default(); oz * oy * ox];
    out.par_chunks_mut(oy * ox).enumerate().for_each(|(z, slab)| {
        for (y, row) in slab.chunks_mut(ox).enumerate() {
            let base = (zs[z] * iy + ys[y]) * ix;
            for (x, v) in row.iter_mut().enumerate() {
                *v = src[base + xs[x]];
            }
        }
    });
    out
}

fn lerp(a: f32, b: f32, t: f64) -> f32 {
    if a == b {
        a
    } else {
        (a as f64 + t * (b as f64 - a as f64)) as f32
    }
}

fn resample_trilinear(src: &[f32], from: &Geometry, to: &Geometry) -> Vec<f32> {
    let [iz, iy, ix] = from.shape();
    let [oz, oy, ox] = to.shape();
    let r = ratios(from, to);
    let zs = source_coords(oz, iz, r[0]);
    let ys = source_coords(oy, iy, r[1]);
    let xs = source_coords(ox, ix, r[2]);
    let at = |z: usize, y: usize, x: usize| src[(z * iy + y) * ix + x];
    let mut out = vec![0f32; oz * oy * ox];
    out.par_chunks_mut(oy * ox).enumerate().for_each(|(z, slab)| {
        let (z0, z1, tz) = zs[z];
        for (y, row) in slab.chunks_mut(ox).enumerate() {
            let (y0, y1, ty) = ys[y];
            for (x, v) in row.iter_mut().enumerate() {
                let (x0, x1, tx) = xs[x];
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), tx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), tx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), tx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), tx);
                *v = lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz);
            }
        }
    });
    out
}

/// Nearest-neighbor resampling of a label grid.
pub fn resample_labels(volume: &LabelVolume, target_spacing: [f64; 3]) -> Result<LabelVolume> {
    let to = target_geometry(volume.geometry(), target_spacing)?;
    let data = resample_nearest(volume.as_slice(), volume.geometry(), &to);
    let grid = Array3::from_shape_vec(to.shape(), data).expect("shape matches");
    LabelVolume::new(to, grid)
}

pub fn resample_scalar(
    volume: &ScalarVolume,
    target_spacing: [f64; 3],
    mode: ResampleMode,
) -> Result<ScalarVolume> {
    let to = target_geometry(volume.geometry(), target_spacing)?;
    let data = match mode {
        ResampleMode::Nearest => resample_nearest(volume.as_slice(), volume.geometry(), &to),
        ResampleMode::Trilinear => resample_trilinear(volume.as_slice(), volume.geometry(), &to),
    };
    let grid = Array3::from_shape_vec(to.shape(), data).expect("shape matches");
    ScalarVolume::new(to, grid)
}
