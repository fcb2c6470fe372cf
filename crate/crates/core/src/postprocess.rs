//! Per-organ post-processing: left/right repair, largest-component and
//! size-constraint filters, and their compositions PP1 to PP4.
//!
//! | strategy | lr repair (paired organs) | then                                |
//! |----------|---------------------------|-------------------------------------|
//! | PP1      | yes                       | drop components < rate · min volume |
//! | PP2      | yes                       | same, but never the last component  |
//! | PP3      | yes                       | keep the largest component          |
//! | PP4      | yes                       | nothing                             |
//! | None     | no                        | nothing                             |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::components::{connected_components, pooled_components, ComponentSet, Connectivity};
use crate::error::{Error, Result};
use crate::organs::{LrPair, OrganSpec, OrganTable, Side};
use crate::volume::LabelVolume;

/// Strategy family without its rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    None,
    PP1,
    PP2,
    PP3,
    PP4,
}

impl StrategyKind {
    pub fn takes_rate(self) -> bool {
        matches!(self, StrategyKind::PP1 | StrategyKind::PP2)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::None => "None",
            StrategyKind::PP1 => "PP1",
            StrategyKind::PP2 => "PP2",
            StrategyKind::PP3 => "PP3",
            StrategyKind::PP4 => "PP4",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "None" | "none" | "-" => Ok(StrategyKind::None),
            "PP1" => Ok(StrategyKind::PP1),
            "PP2" => Ok(StrategyKind::PP2),
            "PP3" => Ok(StrategyKind::PP3),
            "PP4" => Ok(StrategyKind::PP4),
            other => Err(Error::InvalidConfig(format!("unknown strategy '{other}'"))),
        }
    }
}

/// A post-processing strategy for one organ.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "StrategyRepr", into = "StrategyRepr")]
pub enum Strategy {
    #[default]
    None,
    PP1 { rate: f64 },
    PP2 { rate: f64 },
    PP3,
    PP4,
}

#[derive(Serialize, Deserialize)]
struct StrategyRepr {
    kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rate: Option<f64>,
}

impl TryFrom<StrategyRepr> for Strategy {
    type Error = Error;

    fn try_from(r: StrategyRepr) -> Result<Self> {
        Strategy::new(r.kind, r.rate)
    }
}

impl From<Strategy> for StrategyRepr {
    fn from(s: Strategy) -> Self {
        StrategyRepr {
            kind: s.kind(),
            rate: s.rate(),
        }
    }
}

impl Strategy {
    /// Rate must be given exactly for PP1/PP2 and lie in (0, 1].
    pub fn new(kind: StrategyKind, rate: Option<f64>) -> Result<Self> {
        let s = match (kind, rate) {
            (StrategyKind::None, None) => Strategy::None,
            (StrategyKind::PP3, None) => Strategy::PP3,
            (StrategyKind::PP4, None) => Strategy::PP4,
            (StrategyKind::PP1, Some(rate)) => Strategy::PP1 { rate },
            (StrategyKind::PP2, Some(rate)) => Strategy::PP2 { rate },
            (k, r) => {
                return Err(Error::InvalidConfig(format!(
                    "strategy {k} {} a rate",
                    if r.is_some() { "does not take" } else { "requires" }
                )))
            }
        };
        s.validate()?;
        Ok(s)
    }

    pub fn kind(&self) -> StrategyKind {
        match self {
            Strategy::None => StrategyKind::None,
            Strategy::PP1 { .. } => StrategyKind::PP1,
            Strategy::PP2 { .. } => StrategyKind::PP2,
            Strategy::PP3 => StrategyKind::PP3,
            Strategy::PP4 => StrategyKind::PP4,
        }
    }

    pub fn rate(&self) -> Option<f64> {
        match *self {
            Strategy::PP1 { rate } | Strategy::PP2 { rate } => Some(rate),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(rate) = self.rate() {
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(Error::InvalidConfig(format!("rate {rate} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Whether the strategy starts with left/right repair.
    pub fn repairs_lr(&self) -> bool {
        !matches!(self, Strategy::None)
    }

    /// The component filter that follows the lr step.
    pub fn filter(&self, organ: &OrganSpec) -> Option<ComponentFilter> {
        match *self {
            Strategy::PP1 { rate } => Some(ComponentFilter::BelowVolume(rate * organ.min_volume_mm3)),
            Strategy::PP2 { rate } => Some(ComponentFilter::BelowVolumeKeepSole(
                rate * organ.min_volume_mm3,
            )),
            Strategy::PP3 => Some(ComponentFilter::KeepLargest),
            Strategy::None | Strategy::PP4 => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rate() {
            Some(r) => write!(f, "{} (rate {r})", self.kind()),
            None => write!(f, "{}", self.kind()),
        }
    }
}

/// Component-level removal rule for a single organ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComponentFilter {
    /// Keep only the component with the largest volume.
    KeepLargest,
    /// Remove every component smaller than the threshold (mm³).
    BelowVolume(f64),
    /// As `BelowVolume`, but the organ is never emptied: if nothing reaches
    /// the threshold the largest component survives.
    BelowVolumeKeepSole(f64),
}

impl ComponentFilter {
    /// Marks components to remove. `volumes` are in component order (by first
    /// voxel), which also breaks volume ties in favor of the earlier one.
    pub fn removals(&self, volumes: &[f64]) -> Vec<bool> {
        let largest = || {
            volumes
                .iter()
                .enumerate()
                .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((i, v)),
                })
                .map(|(i, _)| i)
        };
        match *self {
            ComponentFilter::KeepLargest => {
                let keep = largest();
                (0..volumes.len()).map(|i| Some(i) != keep).collect()
            }
            ComponentFilter::BelowVolume(threshold) => {
                volumes.iter().map(|&v| v < threshold).collect()
            }
            ComponentFilter::BelowVolumeKeepSole(threshold) => {
                let mut remove: Vec<bool> = volumes.iter().map(|&v| v < threshold).collect();
                if remove.iter().all(|&r| r) {
                    if let Some(i) = largest() {
                        remove[i] = false;
                    }
                }
                remove
            }
        }
    }
}

fn clear_components(volume: &mut LabelVolume, set: &ComponentSet, remove: &[bool]) {
    if !remove.iter().any(|&r| r) {
        return;
    }
    let labels = volume.as_slice_mut();
    set.for_each_voxel(|idx, id| {
        if remove[id] {
            labels[idx] = 0;
        }
    });
}

pub(crate) fn filter_in_place(
    volume: &mut LabelVolume,
    label: u8,
    filter: ComponentFilter,
    connectivity: Connectivity,
) {
    let set = connected_components(volume, &[label], connectivity);
    let volumes: Vec<f64> = set.components().iter().map(|c| c.volume_mm3).collect();
    let remove = filter.removals(&volumes);
    clear_components(volume, &set, &remove);
}

/// Removes all components of `label` except the largest by volume.
pub fn keep_largest_component(
    volume: &LabelVolume,
    label: u8,
    connectivity: Connectivity,
) -> LabelVolume {
    let mut out = volume.clone();
    filter_in_place(&mut out, label, ComponentFilter::KeepLargest, connectivity);
    out
}

fn check_rate(rate: f64) -> Result<()> {
    Strategy::PP1 { rate }.validate()
}

/// Removes components of the organ smaller than `rate · min_volume_mm3`.
pub fn size_constraint_filter(
    volume: &LabelVolume,
    organ: &OrganSpec,
    rate: f64,
    connectivity: Connectivity,
) -> Result<LabelVolume> {
    check_rate(rate)?;
    let mut out = volume.clone();
    let filter = ComponentFilter::BelowVolume(rate * organ.min_volume_mm3);
    filter_in_place(&mut out, organ.label, filter, connectivity);
    Ok(out)
}

/// Like [`size_constraint_filter`] but never removes the organ's only
/// remaining region; when every component is below threshold the largest stays.
pub fn size_constrained_component_filter(
    volume: &LabelVolume,
    organ: &OrganSpec,
    rate: f64,
    connectivity: Connectivity,
) -> Result<LabelVolume> {
    check_rate(rate)?;
    let mut out = volume.clone();
    let filter = ComponentFilter::BelowVolumeKeepSole(rate * organ.min_volume_mm3);
    filter_in_place(&mut out, organ.label, filter, connectivity);
    Ok(out)
}

/// Relabels each pooled region of a left/right pair wholly as left or right
/// according to its patient-space position.
///
/// Two regions are assigned by relative order (the one further towards patient
/// right becomes the right organ). With more regions each is compared to the
/// midpoint of the pooled mask's left-right extent; a single region is
/// compared to the image centre. Exact ties keep the region's majority label.
pub fn fix_left_right(
    volume: &LabelVolume,
    pair: LrPair,
    connectivity: Connectivity,
) -> Result<LabelVolume> {
    let mut out = volume.clone();
    fix_left_right_in_place(&mut out, pair, connectivity)?;
    Ok(out)
}

pub(crate) fn fix_left_right_in_place(
    volume: &mut LabelVolume,
    pair: LrPair,
    connectivity: Connectivity,
) -> Result<()> {
    if pair.left == pair.right {
        return Err(Error::InvalidConfig(format!(
            "left/right pair uses label {} twice",
            pair.left
        )));
    }
    let set = pooled_components(volume, (pair.left, pair.right), connectivity);
    if set.is_empty() {
        return Ok(());
    }
    let geometry = volume.geometry().clone();
    if !geometry.is_oriented() {
        return Err(Error::MissingOrientation(
            "volume carries no patient orientation (no qform/sform)".into(),
        ));
    }
    let lr_row = geometry.direction()[0];
    if lr_row.iter().all(|v| v.abs() < 1e-6) {
        return Err(Error::MissingOrientation(
            "no voxel axis has a left-right component".into(),
        ));
    }

    // patient x (RAS+) grows towards the patient's right
    let comps = set.components();
    let xs: Vec<f64> = comps.iter().map(|c| c.centroid_mm[0]).collect();
    let majority = |i: usize| {
        if comps[i].count_of(pair.right) > comps[i].count_of(pair.left) {
            Side::Right
        } else {
            Side::Left
        }
    };
    let by_reference = |reference: f64| -> Vec<Side> {
        (0..comps.len())
            .map(|i| {
                if xs[i] > reference {
                    Side::Right
                } else if xs[i] < reference {
                    Side::Left
                } else {
                    majority(i)
                }
            })
            .collect()
    };

    let sides = match comps.len() {
        1 => by_reference(geometry.center()[0]),
        2 if xs[0] != xs[1] => {
            if xs[0] > xs[1] {
                vec![Side::Right, Side::Left]
            } else {
                vec![Side::Left, Side::Right]
            }
        }
        _ => {
            let (lo, hi) = pooled_lr_extent(&set, &geometry);
            by_reference(0.5 * (lo + hi))
        }
    };

    let targets: Vec<u8> = sides
        .iter()
        .map(|s| match s {
            Side::Left => pair.left,
            Side::Right => pair.right,
        })
        .collect();
    let labels = volume.as_slice_mut();
    set.for_each_voxel(|idx, id| labels[idx] = targets[id]);
    Ok(())
}

/// Min and max patient x over the centres of all pooled voxels.
fn pooled_lr_extent(set: &ComponentSet, geometry: &crate::volume::Geometry) -> (f64, f64) {
    let [_, ny, nx] = geometry.shape();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    set.for_each_voxel(|idx, _| {
        let z = idx / (ny * nx);
        let y = (idx / nx) % ny;
        let x = idx % nx;
        let px = geometry.to_patient([z as f64, y as f64, x as f64])[0];
        lo = lo.min(px);
        hi = hi.max(px);
    });
    (lo, hi)
}

/// Applies one organ's strategy: lr repair (paired organs only) then its filter.
pub fn apply_strategy(
    volume: &LabelVolume,
    label: u8,
    strategy: Strategy,
    organs: &OrganTable,
    connectivity: Connectivity,
) -> Result<LabelVolume> {
    strategy.validate()?;
    let organ = organs
        .get(label)
        .ok_or_else(|| Error::InvalidConfig(format!("organ {label} is not in the organ table")))?;
    let mut out = volume.clone();
    if strategy.repairs_lr() {
        if let Some(pair) = organs.pair_of(label) {
            fix_left_right_in_place(&mut out, pair, connectivity)?;
        }
    }
    if let Some(filter) = strategy.filter(organ) {
        filter_in_place(&mut out, label, filter, connectivity);
    }
    Ok(out)
}

/// Per-organ strategies together with the organ table they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct PPPlan {
    pub organs: OrganTable,
    pub strategies: BTreeMap<u8, Strategy>,
}

#[derive(Serialize, Deserialize)]
struct PlanEntry {
    #[serde(flatten)]
    organ: OrganSpec,
    #[serde(default)]
    strategy: Strategy,
}

#[derive(Serialize, Deserialize)]
struct PlanRepr {
    organs: Vec<PlanEntry>,
}

impl Serialize for PPPlan {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut organs: Vec<&OrganSpec> = self.organs.organs.iter().collect();
        organs.sort_by_key(|o| o.label);
        PlanRepr {
            organs: organs
                .into_iter()
                .map(|o| PlanEntry {
                    organ: o.clone(),
                    strategy: self.strategy(o.label),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PPPlan {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PlanRepr::deserialize(d)?;
        let strategies = repr
            .organs
            .iter()
            .map(|e| (e.organ.label, e.strategy))
            .collect();
        let organs = OrganTable {
            organs: repr.organs.into_iter().map(|e| e.organ).collect(),
        };
        let plan = PPPlan { organs, strategies };
        plan.validate().map_err(serde::de::Error::custom)?;
        Ok(plan)
    }
}

impl PPPlan {
    /// Every organ of the table mapped to `None`.
    pub fn none(organs: OrganTable) -> Self {
        let strategies = organs.labels().into_iter().map(|l| (l, Strategy::None)).collect();
        PPPlan { organs, strategies }
    }

    pub fn strategy(&self, label: u8) -> Strategy {
        self.strategies.get(&label).copied().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        self.organs.validate()?;
        for (&label, strategy) in &self.strategies {
            if self.organs.get(label).is_none() {
                return Err(Error::InvalidConfig(format!(
                    "plan names organ {label} which is not in the organ table"
                )));
            }
            strategy.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Reported CT-only (task 1) plan for the AMOS label map.
    pub fn amos_task1() -> Self {
        PPPlan::from_json(include_str!("../plans/amos_task1.json"))
            .expect("bundled plan is valid")
    }

    /// Reported CT+MRI (task 2) plan for the AMOS label map.
    pub fn amos_task2() -> Self {
        PPPlan::from_json(include_str!("../plans/amos_task2.json"))
            .expect("bundled plan is valid")
    }
}

/// Applies every organ's strategy in ascending label order. Each left/right
/// pair is repaired at most once, before either member is filtered.
pub fn apply_plan(
    volume: &LabelVolume,
    plan: &PPPlan,
    connectivity: Connectivity,
) -> Result<LabelVolume> {
    plan.validate()?;
    let mut out = volume.clone();
    let mut repaired: BTreeSet<LrPair> = BTreeSet::new();
    for (&label, strategy) in &plan.strategies {
        let organ = plan.organs.get(label).expect("validated");
        if strategy.repairs_lr() {
            if let Some(pair) = plan.organs.pair_of(label) {
                if repaired.insert(pair) {
                    fix_left_right_in_place(&mut out, pair, connectivity)?;
                }
            }
        }
        if let Some(filter) = strategy.filter(organ) {
            filter_in_place(&mut out, label, filter, connectivity);
        }
    }
    Ok(out)
}
