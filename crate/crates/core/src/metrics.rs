//! Dice evaluation and the volume confusion matrix.
//!
//! A label absent from both prediction and reference scores Dice 1.0; absent
//! from only one of them it scores 0.0. False positives on cases without the
//! organ are therefore penalized, and removing them is rewarded.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::organs::OrganTable;
use crate::volume::LabelVolume;

/// Spacing difference (mm) at which two volumes no longer share a geometry.
pub const SPACING_TOLERANCE: f64 = 1e-3;

pub const EMPTY_LABEL_CONVENTION: &str = "both-empty=1.0; one-sided-empty=0.0";

pub(crate) fn check_pair(pred: &LabelVolume, reference: &LabelVolume) -> Result<()> {
    pred.geometry()
        .ensure_compatible(reference.geometry(), SPACING_TOLERANCE)
}

/// Dice of one label from its overlap and the two mask sizes.
pub fn dice_from_counts(intersection: u64, pred: u64, reference: u64) -> f64 {
    if pred + reference == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / (pred + reference) as f64
    }
}

/// Dice coefficient 2|P∩R| / (|P| + |R|) of one label.
pub fn dice(pred: &LabelVolume, reference: &LabelVolume, label: u8) -> Result<f64> {
    check_pair(pred, reference)?;
    let (mut both, mut p, mut r) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.as_slice().iter().zip(reference.as_slice()) {
        let in_p = a == label;
        let in_r = b == label;
        p += in_p as u64;
        r += in_r as u64;
        both += (in_p && in_r) as u64;
    }
    Ok(dice_from_counts(both, p, r))
}

/// Voxel counts indexed `[reference][prediction]` over `classes` labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tally {
    classes: usize,
    counts: Vec<u64>,
}

impl Tally {
    pub fn new(pred: &LabelVolume, reference: &LabelVolume, classes: usize) -> Result<Self> {
        check_pair(pred, reference)?;
        let mut counts = vec![0u64; classes * classes];
        for (&p, &r) in pred.as_slice().iter().zip(reference.as_slice()) {
            let (p, r) = (p as usize, r as usize);
            if p >= classes || r >= classes {
                return Err(Error::InvalidVolume(format!(
                    "label {} outside the {classes}-class evaluation range",
                    p.max(r)
                )));
            }
            counts[r * classes + p] += 1;
        }
        Ok(Tally { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, reference: usize, pred: usize) -> u64 {
        self.counts[reference * self.classes + pred]
    }

    pub fn dice(&self, label: u8) -> f64 {
        let l = label as usize;
        if l >= self.classes {
            return 1.0;
        }
        let pred: u64 = (0..self.classes).map(|r| self.get(r, l)).sum();
        let reference: u64 = (0..self.classes).map(|p| self.get(l, p)).sum();
        dice_from_counts(self.get(l, l), pred, reference)
    }
}

/// Reference-by-prediction physical volumes, summed over cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `[i][j]`: mm³ with reference label i predicted as j.
    pub volumes_mm3: Vec<Vec<f64>>,
    /// Off-diagonal row shares in percent; the diagonal is excluded from the
    /// normalization and reported as 0.
    pub row_percent: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    fn from_volumes(volumes_mm3: Vec<Vec<f64>>) -> Self {
        let row_percent = volumes_mm3
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let off: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, v)| v)
                    .sum();
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| if j == i || off == 0.0 { 0.0 } else { 100.0 * v / off })
                    .collect()
            })
            .collect();
        ConfusionMatrix {
            volumes_mm3,
            row_percent,
        }
    }

    pub fn classes(&self) -> usize {
        self.volumes_mm3.len()
    }

    fn csv(matrix: &[Vec<f64>]) -> String {
        let n = matrix.len();
        let mut out = String::from("reference\\prediction");
        for j in 0..n {
            let _ = write!(out, ",{j}");
        }
        out.push('\n');
        for (i, row) in matrix.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv_mm3(&self) -> String {
        Self::csv(&self.volumes_mm3)
    }

    pub fn to_csv_percent(&self) -> String {
        Self::csv(&self.row_percent)
    }
}

pub(crate) fn check_cases(preds: &[LabelVolume], refs: &[LabelVolume]) -> Result<()> {
    if preds.len() != refs.len() {
        return Err(Error::InvalidConfig(format!(
            "{} predictions but {} references",
            preds.len(),
            refs.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidConfig("no cases to evaluate".into()));
    }
    Ok(())
}

fn tallies(preds: &[LabelVolume], refs: &[LabelVolume], classes: usize) -> Result<Vec<Tally>> {
    preds
        .par_iter()
        .zip(refs.par_iter())
        .map(|(p, r)| Tally::new(p, r, classes))
        .collect()
}

fn accumulate(tallies: &[Tally], voxel_volumes: impl Iterator<Item = f64>, classes: usize) -> ConfusionMatrix {
    let mut volumes = vec![vec![0.0; classes]; classes];
    for (t, vv) in tallies.iter().zip(voxel_volumes) {
        for (i, row) in volumes.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                let n = t.get(i, j);
                if n != 0 {
                    *cell += n as f64 * vv;
                }
            }
        }
    }
    ConfusionMatrix::from_volumes(volumes)
}

/// Confusion over labels `0..classes`, accumulated in mm³ across cases.
pub fn confusion_matrix(
    preds: &[LabelVolume],
    refs: &[LabelVolume],
    classes: usize,
) -> Result<ConfusionMatrix> {
    check_cases(preds, refs)?;
    let t = tallies(preds, refs, classes)?;
    Ok(accumulate(&t, refs.iter().map(|r| r.geometry().voxel_volume()), classes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean Dice over cases per organ label.
    pub per_organ_dice: BTreeMap<u8, f64>,
    /// Equal-weight mean over organs.
    pub mean_dice: f64,
    pub case_count: usize,
    pub empty_label_convention: String,
    pub confusion: ConfusionMatrix,
}

/// Per-organ Dice averaged over cases, their organ mean, and the confusion
/// matrix over labels `0..=max organ label`.
pub fn evaluate_cases(
    preds: &[LabelVolume],
    refs: &[LabelVolume],
    organs: &OrganTable,
) -> Result<EvalReport> {
    check_cases(preds, refs)?;
    let classes = organs.max_label() as usize + 1;
    let t = tallies(preds, refs, classes)?;
    let labels = organs.labels();
    let n = t.len() as f64;
    let per_organ_dice: BTreeMap<u8, f64> = labels
        .iter()
        .map(|&l| (l, t.iter().map(|c| c.dice(l)).sum::<f64>() / n))
        .collect();
    let mean_dice = if per_organ_dice.is_empty() {
        0.0
    } else {
        per_organ_dice.values().sum::<f64>() / per_organ_dice.len() as f64
    };
    Ok(EvalReport {
        per_organ_dice,
        mean_dice,
        case_count: t.len(),
        empty_label_convention: EMPTY_LABEL_CONVENTION.to_string(),
        confusion: accumulate(&t, refs.iter().map(|r| r.geometry().voxel_volume()), classes),
    })
}

/// One row of a before/after post-processing comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: u8,
    pub organ: String,
    pub strategy: String,
    pub dice_before: f64,
    pub dice_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanComparison {
    pub rows: Vec<ComparisonRow>,
    pub mean_before: f64,
    pub mean_after: f64,
    pub case_count: usize,
    pub empty_label_convention: String,
}

impl PlanComparison {
    pub fn new(
        before: &EvalReport,
        after: &EvalReport,
        organs: &OrganTable,
        strategy_of: impl Fn(u8) -> String,
    ) -> Self {
        let rows = before
            .per_organ_dice
            .iter()
            .map(|(&label, &dice_before)| ComparisonRow {
                label,
                organ: organs.get(label).map(|o| o.name.clone()).unwrap_or_default(),
                strategy: strategy_of(label),
                dice_before,
                dice_after: after.per_organ_dice.get(&label).copied().unwrap_or(f64::NAN),
            })
            .collect();
        PlanComparison {
            rows,
            mean_before: before.mean_dice,
            mean_after: after.mean_dice,
            case_count: before.case_count,
            empty_label_convention: before.empty_label_convention.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use ndarray::Array3;

    fn vol(values: &[u8]) -> LabelVolume {
        let g = Geometry::new([1, 1, values.len()], [1.0; 3]).unwrap();
        LabelVolume::new(g, Array3::from_shape_vec((1, 1, values.len()), values.to_vec()).unwrap())
            .unwrap()
    }

    #[test]
    fn identical_masks_score_one() {
        let a = vol(&[0, 1, 1, 2]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        assert_eq!(dice(&vol(&[1, 1, 0, 0]), &vol(&[0, 0, 1, 1]), 1).unwrap(), 0.0);
    }

    #[test]
    fn half_overlap() {
        // |P| = 2, |R| = 2, |P∩R| = 1 -> 2·1 / 4
        assert_eq!(dice(&vol(&[1, 1, 0]), &vol(&[0, 1, 1]), 1).unwrap(), 0.5);
    }

    #[test]
    fn empty_label_conventions() {
        let z = vol(&[0, 0, 0]);
        assert_eq!(dice(&z, &z, 5).unwrap(), 1.0);
        assert_eq!(dice(&vol(&[0, 5, 0]), &z, 5).unwrap(), 0.0);
        assert_eq!(dice(&z, &vol(&[0, 5, 0]), 5).unwrap(), 0.0);
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let a = vol(&[0, 1]);
        let b = vol(&[0, 1, 1]);
        assert!(matches!(dice(&a, &b, 1), Err(Error::GeometryMismatch(_))));
        let g = Geometry::new([1, 1, 2], [1.0, 1.0, 1.002]).unwrap();
        let c = LabelVolume::new(g, Array3::zeros((1, 1, 2))).unwrap();
        assert!(dice(&a, &c, 1).is_err());
        let g = Geometry::new([1, 1, 2], [1.0, 1.0, 1.0005]).unwrap();
        let d = LabelVolume::new(g, Array3::zeros((1, 1, 2))).unwrap();
        assert!(dice(&a, &d, 1).is_ok());
    }

    #[test]
    fn perfect_single_case_report() {
        let organs = OrganTable::amos();
        let a = vol(&[0, 1, 2, 3, 6, 6]);
        let r = evaluate_cases(&[a.clone()], &[a], &organs).unwrap();
        assert_eq!(r.mean_dice, 1.0);
        assert!(r.per_organ_dice.values().all(|&d| d == 1.0));
        assert_eq!(r.per_organ_dice.len(), 15);
    }

    #[test]
    fn organ_dice_averages_cases() {
        let organs = OrganTable::new(vec![crate::OrganSpec::new(1, "a", 0.0)]).unwrap();
        let preds = [vol(&[1, 1, 0]), vol(&[1, 1, 0])];
        let refs = [vol(&[1, 1, 0]), vol(&[0, 1, 1])];
        let r = evaluate_cases(&preds, &refs, &organs).unwrap();
        assert_eq!(r.per_organ_dice[&1], 0.75);
        assert_eq!(r.mean_dice, 0.75);
        assert_eq!(r.case_count, 2);
    }

    #[test]
    fn case_count_mismatch_rejected() {
        let organs = OrganTable::amos();
        assert!(evaluate_cases(&[vol(&[0])], &[], &organs).is_err());
        assert!(evaluate_cases(&[], &[], &organs).is_err());
    }

    #[test]
    fn perfect_prediction_has_empty_off_diagonal() {
        let a = vol(&[0, 1, 2, 3]);
        let m = confusion_matrix(&[a.clone()], &[a], 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(m.volumes_mm3[i][j], 0.0);
                }
                assert_eq!(m.row_percent[i][j], 0.0);
            }
        }
        assert_eq!(m.volumes_mm3[2][2], 1.0);
    }

    #[test]
    fn single_confused_voxel() {
        let m = confusion_matrix(&[vol(&[0, 3, 2])], &[vol(&[0, 2, 2])], 4).unwrap();
        assert_eq!(m.volumes_mm3[2][3], 1.0);
        assert_eq!(m.row_percent[2][3], 100.0);
        assert_eq!(m.row_percent[2][2], 0.0);
    }

    #[test]
    fn out_of_range_label_rejected() {
        assert!(confusion_matrix(&[vol(&[0, 9])], &[vol(&[0, 0])], 4).is_err());
    }

    #[test]
    fn csv_layout() {
        let m = confusion_matrix(&[vol(&[0, 1])], &[vol(&[0, 0])], 2).unwrap();
        assert_eq!(m.to_csv_mm3(), "reference\\prediction,0,1\n0,1,1\n1,0,0\n");
        assert_eq!(m.to_csv_percent(), "reference\\prediction,0,1\n0,0,100\n1,0,0\n");
    }
}
