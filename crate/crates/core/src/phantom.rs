//! Seeded synthetic cases: ellipsoidal organs, a prediction with injected
//! defects, an intensity image and softened probability fixtures.
//!
//! # Randomness
//!
//! All draws come from xoshiro256++ seeded through SplitMix64
//! (`seed_from_u64`), so a spec produces the same bytes on every platform
//! and can be reproduced in another language:
//!
//! * each stage has its own stream, seeded with
//!   `seed + k · 0x9E3779B97F4A7C15` (wrapping) for stage `k`: 0 placement,
//!   1 defects, 2 image noise, 3 + i probability fixture `i`;
//! * a uniform real is `(next_u64 >> 11) · 2⁻⁵³`, in [0, 1);
//! * a uniform integer below `n` is `floor(uniform · n)`;
//! * a uniform real in [a, b] is `a + (b − a) · uniform`.
//!
//! # Geometry
//!
//! Volumes use the standard axial orientation at the patient origin, so the
//! array x axis runs towards the patient's right. A `right` organ lies
//! entirely in the half with larger x, a `left` one in the other half.
//! Blobs of different organs (and separate blobs of one organ) never touch,
//! not even diagonally, and keep one voxel of clearance from the border.

use std::collections::{BTreeMap, VecDeque};

use ndarray::{Array3, Array4};
use rand_xoshiro::rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::IntensityBand;
use crate::organs::{OrganSpec, OrganTable, Side};
use crate::volume::{Geometry, LabelVolume, ProbVolume, ScalarVolume};

const PLACEMENT_ATTEMPTS: usize = 2000;
const GROWTH_ATTEMPTS: usize = 500;
const STREAM_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;
/// Probability that a fixture voxel takes a face neighbour's label.
const FIXTURE_JITTER: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomOrgan {
    pub label_id: u8,
    #[serde(default = "one")]
    pub blob_count: usize,
    /// Semi-axis range; each semi-axis is drawn independently.
    pub radius_range_mm: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_side: Option<Side>,
    /// Contralateral organ; required for `lr_swap` defects.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_partner: Option<u8>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    /// Magnitude ≥ 1 swaps the organ with its partner; a fraction in (0, 1)
    /// relabels that share of the organ's x extent nearest the midline.
    LrSwap,
    /// A detached blob of exactly `magnitude` voxels.
    Satellite,
    /// `magnitude` rounds of face-connected erosion (not repairable by any
    /// post-processing step; lowers the baseline Dice).
    Erode,
    /// Organ removed from both volumes, then a `magnitude`-voxel false
    /// positive added to the prediction.
    MissingOrganFp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Defect {
    pub kind: DefectKind,
    pub target: u8,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    /// (z, y, x) voxels.
    pub shape: [usize; 3],
    /// (z, y, x) mm.
    pub spacing: [f64; 3],
    pub organs: Vec<PhantomOrgan>,
    /// Applied to the prediction in list order.
    #[serde(default)]
    pub defects: Vec<Defect>,
    /// Defaults to the largest organ label + 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default = "default_fixtures")]
    pub prob_fixtures: usize,
    /// Half-width of the uniform noise added to the intensity image.
    #[serde(default = "default_noise")]
    pub intensity_noise: f32,
}

fn default_fixtures() -> usize {
    2
}

fn default_noise() -> f32 {
    5.0
}

/// Intensity at the centre of an organ's band.
pub fn organ_intensity(label: u8) -> f32 {
    40.0 * label as f32
}

/// Integer magnitude of a voxel-count or iteration defect.
fn count_of(d: &Defect) -> Option<usize> {
    (d.magnitude >= 1.0 && d.magnitude.fract() == 0.0 && d.magnitude <= 1e9)
        .then_some(d.magnitude as usize)
}

impl PhantomSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: PhantomSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.shape, self.spacing)
    }

    pub fn classes(&self) -> usize {
        let max = self.organs.iter().map(|o| o.label_id).max().unwrap_or(0) as usize;
        self.num_classes.unwrap_or(max + 1).max(2)
    }

    fn organ(&self, label: u8) -> Option<&PhantomOrgan> {
        self.organs.iter().find(|o| o.label_id == label)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.geometry()?;
        let mut seen = std::collections::BTreeSet::new();
        for o in &self.organs {
            if o.label_id == 0 || !seen.insert(o.label_id) {
                return bad(format!("organ label {} is zero or repeated", o.label_id));
            }
            if o.blob_count == 0 {
                return bad(format!("organ {} has no blobs", o.label_id));
            }
            let [lo, hi] = o.radius_range_mm;
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("organ {} radius range {lo}..{hi} is invalid", o.label_id));
            }
        }
        for o in &self.organs {
            if let Some(p) = o.lr_partner {
                let ok = self.organ(p).is_some_and(|q| {
                    q.lr_partner == Some(o.label_id)
                        && o.lr_side.is_some()
                        && q.lr_side == o.lr_side.map(Side::opposite)
                });
                if !ok || p == o.label_id {
                    return bad(format!(
                        "organ {} and partner {p} need mutual partners on opposite sides",
                        o.label_id
                    ));
                }
            }
        }
        if let Some(c) = self.num_classes {
            if c < 2 || c > 256 || self.organs.iter().any(|o| o.label_id as usize >= c) {
                return bad(format!("num_classes {c} does not cover the organ labels"));
            }
        }
        for d in &self.defects {
            let Some(o) = self.organ(d.target) else {
                return bad(format!("defect targets unknown organ {}", d.target));
            };
            match d.kind {
                DefectKind::LrSwap => {
                    if !(d.magnitude > 0.0 && d.magnitude.is_finite()) {
                        return bad(format!("lr_swap magnitude {} must be positive", d.magnitude));
                    }
                    let Some(p) = o.lr_partner else {
                        return bad(format!("lr_swap target {} has no lr_partner", d.target));
                    };
                    // with more blobs the pooled-extent rule may not undo the swap
                    if o.blob_count != 1 || self.organ(p).map(|q| q.blob_count) != Some(1) {
                        return bad(format!("lr_swap needs single-blob organs ({}, {p})", d.target));
                    }
                }
                _ => {
                    if count_of(d).is_none() {
                        return bad(format!(
                            "{:?} magnitude {} must be a positive integer",
                            d.kind, d.magnitude
                        ));
                    }
                }
            }
        }
        if self.intensity_noise < 0.0 || self.intensity_noise >= 20.0 || !self.intensity_noise.is_finite() {
            return bad(format!("intensity noise {} outside [0, 20)", self.intensity_noise));
        }
        Ok(())
    }

    /// Bands separating organ intensities for a threshold scorer.
    pub fn intensity_bands(&self) -> Vec<IntensityBand> {
        let mut labels: Vec<u8> = self.organs.iter().map(|o| o.label_id).collect();
        labels.sort_unstable();
        labels
            .into_iter()
            .map(|l| IntensityBand {
                low: organ_intensity(l) - 20.0,
                high: organ_intensity(l) + 20.0,
                class: l as usize,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub reference: LabelVolume,
    pub prediction: LabelVolume,
    pub image: ScalarVolume,
    pub prob_fixtures: Vec<ProbVolume>,
    /// Organ table with partners and minimum volumes set to the reference volumes.
    pub organs: OrganTable,
}

struct Stream(Xoshiro256PlusPlus);

impl Stream {
    fn new(seed: u64, stage: u64) -> Self {
        Stream(Xoshiro256PlusPlus::seed_from_u64(
            seed.wrapping_add(stage.wrapping_mul(STREAM_STRIDE)),
        ))
    }

    fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    fn range(&mut self, a: f64, b: f64) -> f64 {
        a + (b - a) * self.uniform()
    }
}

/// Inclusive x-index range an organ on `side` may occupy.
fn side_range(nx: usize, side: Option<Side>) -> (usize, usize) {
    let last = nx.saturating_sub(2);
    let mid = (nx - 1) as f64 / 2.0;
    match side {
        None => (1, last),
        // strictly beyond the image centre with one voxel of clearance
        Some(Side::Left) => (1, ((mid - 1.0).ceil() as usize).min(last)),
        Some(Side::Right) => (((mid + 1.0).floor() as usize).max(1), last),
    }
}

fn neighbors26(shape: [usize; 3], idx: [usize; 3], mut f: impl FnMut([usize; 3])) {
    for dz in -1isize..=1 {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let n = [idx[0] as isize + dz, idx[1] as isize + dy, idx[2] as isize + dx];
                if (0..3).all(|a| n[a] >= 0 && (n[a] as usize) < shape[a]) {
                    f([n[0] as usize, n[1] as usize, n[2] as usize]);
                }
            }
        }
    }
}

const FACE: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

fn step(shape: [usize; 3], idx: [usize; 3], d: [isize; 3]) -> Option<[usize; 3]> {
    let n: [isize; 3] = std::array::from_fn(|a| idx[a] as isize + d[a]);
    (0..3)
        .all(|a| n[a] >= 0 && (n[a] as usize) < shape[a])
        .then(|| std::array::from_fn(|a| n[a] as usize))
}

/// Tries to rasterize one ellipsoid that keeps clear of every labelled voxel.
fn place_blob(
    labels: &mut Array3<u8>,
    spacing: [f64; 3],
    organ: &PhantomOrgan,
    rng: &mut Stream,
) -> Result<()> {
    let shape: [usize; 3] = labels.dim().into();
    let (xlo, xhi) = side_range(shape[2], organ.lr_side);
    let [rlo, rhi] = organ.radius_range_mm;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let radii: [f64; 3] = std::array::from_fn(|_| rng.range(rlo, rhi));
        let half: [f64; 3] = std::array::from_fn(|a| radii[a] / spacing[a]);
        let bounds = [(1, shape[0].saturating_sub(2)), (1, shape[1].saturating_sub(2)), (xlo, xhi)];
        let mut centre = [0.0; 3];
        let mut fits = true;
        for a in 0..3 {
            let lo = bounds[a].0 as f64 + half[a];
            let hi = bounds[a].1 as f64 - half[a];
            if lo > hi {
                fits = false;
                break;
            }
            centre[a] = rng.range(lo, hi);
        }
        if !fits {
            continue;
        }
        let lo: [usize; 3] = std::array::from_fn(|a| (centre[a] - half[a]).floor().max(0.0) as usize);
        let hi: [usize; 3] =
            std::array::from_fn(|a| ((centre[a] + half[a]).ceil() as usize).min(shape[a] - 1));
        let mut voxels = Vec::new();
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    let p = [z, y, x];
                    let r: f64 = (0..3)
                        .map(|a| {
                            let d = (p[a] as f64 - centre[a]) / half[a];
                            d * d
                        })
                        .sum();
                    if r <= 1.0 {
                        voxels.push(p);
                    }
                }
            }
        }
        if voxels.is_empty() {
            continue;
        }
        let mut clear = true;
        'check: for &v in &voxels {
            let mut hit = false;
            neighbors26(shape, v, |n| hit |= labels[n] != 0);
            if hit {
                clear = false;
                break 'check;
            }
        }
        if clear {
            for v in voxels {
                labels[v] = organ.label_id;
            }
            return Ok(());
        }
    }
    Err(Error::Placement(format!(
        "could not place a blob of organ {} after {PLACEMENT_ATTEMPTS} attempts",
        organ.label_id
    )))
}

/// Grows a face-connected blob of exactly `n` voxels that touches no labelled
/// voxel of `pred` or `reference`, restricted to `x_range`.
fn grow_blob(
    pred: &Array3<u8>,
    reference: &Array3<u8>,
    n: usize,
    x_range: (usize, usize),
    rng: &mut Stream,
) -> Option<Vec<[usize; 3]>> {
    let shape: [usize; 3] = pred.dim().into();
    let free = |v: [usize; 3]| {
        if v[2] < x_range.0 || v[2] > x_range.1 {
            return false;
        }
        let mut ok = true;
        neighbors26(shape, v, |q| ok &= pred[q] == 0 && reference[q] == 0);
        ok
    };
    if x_range.0 > x_range.1 {
        return None;
    }
    for _ in 0..GROWTH_ATTEMPTS {
        let seed = [
            rng.below(shape[0]),
            rng.below(shape[1]),
            x_range.0 + rng.below(x_range.1 - x_range.0 + 1),
        ];
        if !free(seed) {
            continue;
        }
        let mut taken = std::collections::HashSet::new();
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([seed]);
        taken.insert(seed);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            if order.len() == n {
                return Some(order);
            }
            for d in FACE {
                if let Some(q) = step(shape, v, d) {
                    if !taken.contains(&q) && free(q) {
                        taken.insert(q);
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    None
}

fn x_extent(labels: &Array3<u8>, label: u8) -> Option<(usize, usize)> {
    labels
        .indexed_iter()
        .filter(|(_, &l)| l == label)
        .fold(None, |acc, ((_, _, x), _)| match acc {
            None => Some((x, x)),
            Some((a, b)) => Some((a.min(x), b.max(x))),
        })
}

fn inject(
    spec: &PhantomSpec,
    d: &Defect,
    reference: &mut Array3<u8>,
    pred: &mut Array3<u8>,
    rng: &mut Stream,
) -> Result<()> {
    let shape: [usize; 3] = pred.dim().into();
    let organ = spec.organ(d.target).expect("validated");
    match d.kind {
        DefectKind::LrSwap => {
            let partner = organ.lr_partner.expect("validated");
            if d.magnitude >= 1.0 {
                pred.mapv_inplace(|l| {
                    if l == d.target {
                        partner
                    } else if l == partner {
                        d.target
                    } else {
                        l
                    }
                });
                return Ok(());
            }
            let Some((lo, hi)) = x_extent(pred, d.target) else {
                return Ok(());
            };
            let width = ((hi - lo + 1) as f64 * d.magnitude).ceil() as usize;
            let medial = |x: usize| match organ.lr_side {
                Some(Side::Right) => x < lo + width,
                _ => x + width > hi,
            };
            for ((_, _, x), l) in pred.indexed_iter_mut() {
                if *l == d.target && medial(x) {
                    *l = partner;
                }
            }
        }
        DefectKind::Satellite | DefectKind::MissingOrganFp => {
            if d.kind == DefectKind::MissingOrganFp {
                reference.mapv_inplace(|l| if l == d.target { 0 } else { l });
                pred.mapv_inplace(|l| if l == d.target { 0 } else { l });
            }
            let n = count_of(d).expect("validated");
            let voxels = grow_blob(pred, reference, n, side_range(shape[2], organ.lr_side), rng)
                .ok_or_else(|| {
                    Error::Placement(format!(
                        "no free room for a {n}-voxel blob of organ {}",
                        d.target
                    ))
                })?;
            for v in voxels {
                pred[v] = d.target;
            }
        }
        DefectKind::Erode => {
            for _ in 0..count_of(d).expect("validated") {
                let snapshot = pred.clone();
                for (idx, l) in pred.indexed_iter_mut() {
                    if *l != d.target {
                        continue;
                    }
                    let idx = [idx.0, idx.1, idx.2];
                    let boundary = FACE
                        .iter()
                        .any(|&f| step(shape, idx, f).is_none_or(|q| snapshot[q] != d.target));
                    if boundary {
                        *l = 0;
                    }
                }
            }
        }
    }
    Ok(())
}

fn fixture(pred: &Array3<u8>, classes: usize, rng: &mut Stream) -> Array4<f32> {
    let shape: [usize; 3] = pred.dim().into();
    let mut out = Array4::<f32>::zeros((classes, shape[0], shape[1], shape[2]));
    for ((z, y, x), &l) in pred.indexed_iter() {
        let mut hot = l as usize;
        if rng.uniform() < FIXTURE_JITTER {
            if let Some(q) = step(shape, [z, y, x], FACE[rng.below(6)]) {
                hot = pred[q] as usize;
            }
        }
        let confidence = rng.range(0.6, 0.95) as f32;
        let rest = (1.0 - confidence) / (classes - 1) as f32;
        for c in 0..classes {
            out[[c, z, y, x]] = if c == hot { confidence } else { rest };
        }
    }
    out
}

/// Builds one phantom case. Errors when the spec is invalid or blobs cannot
/// be placed.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let geometry = spec.geometry()?;
    let mut reference = Array3::<u8>::zeros(spec.shape);

    let mut placement = Stream::new(spec.seed, 0);
    for organ in &spec.organs {
        for _ in 0..organ.blob_count {
            place_blob(&mut reference, spec.spacing, organ, &mut placement)?;
        }
    }

    let mut pred = reference.clone();
    let mut defects = Stream::new(spec.seed, 1);
    for d in &spec.defects {
        inject(spec, d, &mut reference, &mut pred, &mut defects)?;
    }

    let mut noise = Stream::new(spec.seed, 2);
    let amp = spec.intensity_noise as f64;
    let image = reference.mapv(|l| organ_intensity(l) + noise.range(-amp, amp) as f32);

    let classes = spec.classes();
    let prob_fixtures = (0..spec.prob_fixtures)
        .map(|i| {
            let mut rng = Stream::new(spec.seed, 3 + i as u64);
            ProbVolume::new(geometry.clone(), fixture(&pred, classes, &mut rng))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut volumes: BTreeMap<u8, usize> = BTreeMap::new();
    for &l in reference.iter() {
        *volumes.entry(l).or_default() += 1;
    }
    let organs = OrganTable::new(
        spec.organs
            .iter()
            .map(|o| {
                let mut s = OrganSpec::new(
                    o.label_id,
                    format!("organ {}", o.label_id),
                    volumes.get(&o.label_id).copied().unwrap_or(0) as f64 * geometry.voxel_volume(),
                );
                s.lr_partner = o.lr_partner;
                s.side = o.lr_partner.and(o.lr_side);
                s
            })
            .collect(),
    )?;

    Ok(Phantom {
        reference: LabelVolume::new(geometry.clone(), reference)?,
        prediction: LabelVolume::new(geometry.clone(), pred)?,
        image: ScalarVolume::new(geometry, image)?,
        prob_fixtures,
        organs,
    })
}
