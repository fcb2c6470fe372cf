//! Volumetric data model.
//!
//! Grids are stored in (z, y, x) order with x varying fastest, which is also
//! the on-disk voxel order of a NIfTI file. Every millimetre quantity goes
//! through [`Geometry`]; patient coordinates are RAS+ (+x right, +y anterior,
//! +z superior), the NIfTI world convention.

use ndarray::{Array3, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on per-voxel class sums of a normalized probability volume.
pub const NORMALIZATION_TOLERANCE: f32 = 1e-3;

/// Physical placement of a voxel grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryRepr", into = "GeometryRepr")]
pub struct Geometry {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    /// `direction[r][a]`: patient component `r` of the unit vector of array axis `a`.
    direction: [[f64; 3]; 3],
    oriented: bool,
}

#[derive(Serialize, Deserialize)]
struct GeometryRepr {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    direction: [[f64; 3]; 3],
    #[serde(default = "default_true")]
    oriented: bool,
}

fn default_true() -> bool {
    true
}

impl TryFrom<GeometryRepr> for Geometry {
    type Error = Error;

    fn try_from(r: GeometryRepr) -> Result<Self> {
        let mut g = Geometry::new(r.shape, r.spacing)?
            .with_origin(r.origin)
            .with_direction(r.direction)?;
        g.oriented = r.oriented;
        Ok(g)
    }
}

impl From<Geometry> for GeometryRepr {
    fn from(g: Geometry) -> Self {
        GeometryRepr {
            shape: g.shape,
            spacing: g.spacing,
            origin: g.origin,
            direction: g.direction,
            oriented: g.oriented,
        }
    }
}

/// Array axes (z, y, x) mapped onto patient (S, A, R).
pub const AXIAL_DIRECTION: [[f64; 3]; 3] = [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];

impl Geometry {
    /// Axial geometry at the patient origin with the standard orientation.
    pub fn new(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::InvalidGeometry(format!(
                "shape {shape:?} has an empty axis"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGeometry(format!(
                "spacing {spacing:?} must be finite and positive"
            )));
        }
        Ok(Geometry {
            shape,
            spacing,
            origin: [0.0; 3],
            direction: AXIAL_DIRECTION,
            oriented: true,
        })
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn with_direction(mut self, direction: [[f64; 3]; 3]) -> Result<Self> {
        for a in 0..3 {
            let norm = (0..3)
                .map(|r| direction[r][a] * direction[r][a])
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidGeometry(format!(
                    "direction column {a} has norm {norm}"
                )));
            }
        }
        let det = det3(&direction);
        if !det.is_finite() || det.abs() < 1e-6 {
            return Err(Error::InvalidGeometry(format!(
                "direction matrix is singular (det {det})"
            )));
        }
        self.direction = direction;
        self.oriented = true;
        Ok(self)
    }

    /// Marks the patient orientation as unknown (NIfTI files without qform or sform).
    pub fn unoriented(mut self) -> Self {
        self.oriented = false;
        self
    }

    pub fn with_shape(mut self, shape: [usize; 3]) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::InvalidGeometry(format!(
                "shape {shape:?} has an empty axis"
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGeometry(format!(
                "spacing {spacing:?} must be finite and positive"
            )));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn direction(&self) -> [[f64; 3]; 3] {
        self.direction
    }

    pub fn is_oriented(&self) -> bool {
        self.oriented
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Physical volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Patient-space position (mm) of a continuous (z, y, x) voxel index.
    pub fn to_patient(&self, index: [f64; 3]) -> [f64; 3] {
        let mut p = self.origin;
        for (r, pr) in p.iter_mut().enumerate() {
            for a in 0..3 {
                *pr += self.direction[r][a] * self.spacing[a] * index[a];
            }
        }
        p
    }

    /// Patient-space centre of the grid.
    pub fn center(&self) -> [f64; 3] {
        self.to_patient([
            (self.shape[0] - 1) as f64 / 2.0,
            (self.shape[1] - 1) as f64 / 2.0,
            (self.shape[2] - 1) as f64 / 2.0,
        ])
    }

    /// Shapes equal and spacings within `spacing_tol` per axis.
    pub fn ensure_compatible(&self, other: &Geometry, spacing_tol: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::GeometryMismatch(format!(
                "shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        if self
            .spacing
            .iter()
            .zip(other.spacing.iter())
            .any(|(a, b)| (a - b).abs() >= spacing_tol)
        {
            return Err(Error::GeometryMismatch(format!(
                "spacing {:?} vs {:?}",
                self.spacing, other.spacing
            )));
        }
        Ok(())
    }
}

pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn check_extent(geometry: &Geometry, dims: &[usize]) -> Result<()> {
    if dims != geometry.shape {
        return Err(Error::InvalidVolume(format!(
            "grid extent {dims:?} does not match geometry shape {:?}",
            geometry.shape
        )));
    }
    Ok(())
}

/// Integer organ labels, 0 = background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geometry: Geometry,
    labels: Array3<u8>,
}

impl LabelVolume {
    pub fn new(geometry: Geometry, labels: Array3<u8>) -> Result<Self> {
        check_extent(&geometry, labels.shape())?;
        let labels = if labels.is_standard_layout() {
            labels
        } else {
            labels.as_standard_layout().into_owned()
        };
        Ok(LabelVolume { geometry, labels })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        let labels = Array3::zeros(geometry.shape);
        LabelVolume { geometry, labels }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut Array3<u8> {
        &mut self.labels
    }

    /// Contiguous voxel slice in (z, y, x) order.
    pub fn as_slice(&self) -> &[u8] {
        self.labels.as_slice().expect("label grid is kept in standard layout")
    }

    pub fn as_slice_mut(&mut self) -> &mut [u8] {
        self.labels
            .as_slice_mut()
            .expect("label grid is kept in standard layout")
    }

    pub fn into_parts(self) -> (Geometry, Array3<u8>) {
        (self.geometry, self.labels)
    }

    pub fn count(&self, label: u8) -> usize {
        self.as_slice().iter().filter(|&&v| v == label).count()
    }

    /// Rejects any voxel value not in `allowed` (background is always allowed).
    pub fn ensure_labels_within(&self, allowed: &[u8]) -> Result<()> {
        let mut ok = [false; 256];
        ok[0] = true;
        for &l in allowed {
            ok[l as usize] = true;
        }
        if let Some(bad) = self.as_slice().iter().find(|&&v| !ok[v as usize]) {
            return Err(Error::InvalidVolume(format!(
                "label value {bad} is outside the declared label set"
            )));
        }
        Ok(())
    }
}

/// Single-channel intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    geometry: Geometry,
    data: Array3<f32>,
}

impl ScalarVolume {
    pub fn new(geometry: Geometry, data: Array3<f32>) -> Result<Self> {
        check_extent(&geometry, data.shape())?;
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(ScalarVolume { geometry, data })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice().expect("scalar grid is kept in standard layout")
    }

    pub fn into_parts(self) -> (Geometry, Array3<f32>) {
        (self.geometry, self.data)
    }
}

/// Per-class probabilities laid out as (class, z, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    geometry: Geometry,
    probs: Array4<f32>,
    normalized: bool,
}

impl ProbVolume {
    /// Validates that every voxel holds a distribution over classes.
    pub fn new(geometry: Geometry, probs: Array4<f32>) -> Result<Self> {
        let vol = ProbVolume::new_unnormalized(geometry, probs)?;
        if let Some(v) = vol.probs.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidVolume(format!(
                "probability {v} outside [0, 1]"
            )));
        }
        if let Some(sum) = vol.worst_class_sum() {
            return Err(Error::InvalidVolume(format!(
                "class probabilities sum to {sum} at some voxel"
            )));
        }
        Ok(ProbVolume {
            normalized: true,
            ..vol
        })
    }

    /// Raw accumulator state; no per-voxel sum requirement.
    pub fn new_unnormalized(geometry: Geometry, probs: Array4<f32>) -> Result<Self> {
        if probs.shape()[0] == 0 {
            return Err(Error::InvalidVolume("probability volume has no classes".into()));
        }
        check_extent(&geometry, &probs.shape()[1..])?;
        let probs = if probs.is_standard_layout() {
            probs
        } else {
            probs.as_standard_layout().into_owned()
        };
        Ok(ProbVolume {
            geometry,
            probs,
            normalized: false,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn probs(&self) -> &Array4<f32> {
        &self.probs
    }

    pub fn as_slice(&self) -> &[f32] {
        self.probs.as_slice().expect("probability grid is kept in standard layout")
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn into_parts(self) -> (Geometry, Array4<f32>) {
        (self.geometry, self.probs)
    }

    /// Largest deviating per-voxel class sum, if any exceeds the tolerance.
    fn worst_class_sum(&self) -> Option<f32> {
        let sums = self.probs.sum_axis(Axis(0));
        sums.iter()
            .copied()
            .filter(|s| !((s - 1.0).abs() <= NORMALIZATION_TOLERANCE))
            .max_by(|a, b| (a - 1.0).abs().total_cmp(&(b - 1.0).abs()))
    }
}

/// Per-voxel index of the most probable class; ties go to the lowest index.
pub fn argmax_labels(probs: &ProbVolume) -> Result<LabelVolume> {
    if !probs.is_normalized() {
        return Err(Error::InvalidVolume(
            "argmax requires a normalized probability volume".into(),
        ));
    }
    let classes = probs.num_classes();
    if classes > 256 {
        return Err(Error::InvalidVolume(format!(
            "{classes} classes do not fit 8-bit labels"
        )));
    }
    let mut labels = Array3::<u8>::zeros(probs.geometry.shape);
    let mut best = probs.probs.index_axis(Axis(0), 0).to_owned();
    for c in 1..classes {
        Zip::from(&mut labels)
            .and(&mut best)
            .and(probs.probs.index_axis(Axis(0), c))
            .for_each(|l, b, &p| {
                if p > *b {
                    *b = p;
                    *l = c as u8;
                }
            });
    }
    LabelVolume::new(probs.geometry.clone(), labels)
}
