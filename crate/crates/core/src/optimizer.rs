//! Per-organ strategy search over cross-validation predictions.
//!
//! Every organ is optimized on its own: each candidate strategy is applied to
//! the raw predictions of all cases, Dice is measured for that organ only,
//! and the candidate with the highest mean wins. For paired organs the lr
//! step still rewrites both members, but only the organ under optimization is
//! scored.
//!
//! The lr step is identical for every non-`None` strategy, so per case and
//! organ the components left after it are extracted once, together with how
//! many of their voxels agree with the reference. Any filter is then just a
//! choice of components to drop, and its Dice follows from counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::{connected_components, Connectivity};
use crate::error::{Error, Result};
use crate::metrics::{check_cases, check_pair, dice_from_counts, evaluate_cases, EvalReport};
use crate::organs::OrganTable;
use crate::postprocess::{apply_plan, fix_left_right_in_place, PPPlan, Strategy, StrategyKind};
use crate::volume::LabelVolume;

pub const DEFAULT_RATES: [f64; 6] = [0.1, 0.25, 0.5, 0.75, 0.9, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_rates")]
    pub rate_grid: Vec<f64>,
    /// `None` is always evaluated, listed here or not.
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyKind>,
    #[serde(default)]
    pub connectivity: Connectivity,
}

fn default_rates() -> Vec<f64> {
    DEFAULT_RATES.to_vec()
}

fn default_strategies() -> Vec<StrategyKind> {
    vec![
        StrategyKind::None,
        StrategyKind::PP1,
        StrategyKind::PP2,
        StrategyKind::PP3,
        StrategyKind::PP4,
    ]
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            rate_grid: default_rates(),
            strategies: default_strategies(),
            connectivity: Connectivity::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let needs_rates = self.strategies.iter().any(|k| k.takes_rate());
        if needs_rates && self.rate_grid.is_empty() {
            return Err(Error::InvalidConfig("rate grid is empty".into()));
        }
        for &r in &self.rate_grid {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::InvalidConfig(format!("rate {r} outside (0, 1]")));
            }
        }
        if self.rate_grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidConfig(format!(
                "rate grid {:?} is not strictly increasing",
                self.rate_grid
            )));
        }
        Ok(())
    }

    /// Candidates in tie-break order: None, PP4, PP3, PP1 and PP2 by
    /// ascending rate. An earlier candidate wins ties.
    pub fn candidates(&self) -> Vec<Strategy> {
        let has = |k| self.strategies.contains(&k);
        let mut out = vec![Strategy::None];
        if has(StrategyKind::PP4) {
            out.push(Strategy::PP4);
        }
        if has(StrategyKind::PP3) {
            out.push(Strategy::PP3);
        }
        if has(StrategyKind::PP1) {
            out.extend(self.rate_grid.iter().map(|&rate| Strategy::PP1 { rate }));
        }
        if has(StrategyKind::PP2) {
            out.extend(self.rate_grid.iter().map(|&rate| Strategy::PP2 { rate }));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub strategy: Strategy,
    pub mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    pub plan: PPPlan,
    /// Every evaluated candidate per organ, in tie-break order.
    pub per_organ_trace: BTreeMap<u8, Vec<TraceEntry>>,
}

impl OptimizationResult {
    /// `organ,strategy,rate,mean_dice`; rate is empty for rate-less strategies.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("organ,strategy,rate,mean_dice\n");
        for (label, entries) in &self.per_organ_trace {
            for e in entries {
                let rate = e.strategy.rate().map(|r| r.to_string()).unwrap_or_default();
                writeln!(out, "{label},{},{rate},{}", e.strategy.kind(), e.mean_dice).unwrap();
            }
        }
        out
    }
}

/// Smallest total volume (mm³) of each organ over the references that
/// contain it. Organs absent from every reference are left out.
pub fn observed_min_volumes(refs: &[LabelVolume], organs: &OrganTable) -> BTreeMap<u8, f64> {
    let per_case: Vec<Vec<u64>> = refs
        .par_iter()
        .map(|r| {
            let mut counts = vec![0u64; 256];
            for &l in r.as_slice() {
                counts[l as usize] += 1;
            }
            counts
        })
        .collect();
    let mut out = BTreeMap::new();
    for label in organs.labels() {
        let min = refs
            .iter()
            .zip(&per_case)
            .filter(|(_, c)| c[label as usize] > 0)
            .map(|(r, c)| c[label as usize] as f64 * r.geometry().voxel_volume())
            .fold(f64::INFINITY, f64::min);
        if min.is_finite() {
            out.insert(label, min);
        }
    }
    out
}

/// One organ in one case, reduced to what Dice needs.
struct OrganCase {
    ref_count: u64,
    raw_pred: u64,
    raw_overlap: u64,
    lr_pred: u64,
    lr_overlap: u64,
    /// Components after the lr step: (volume mm³, voxels, voxels agreeing with the reference).
    components: Vec<(f64, u64, u64)>,
}

impl OrganCase {
    fn dice(&self, strategy: &Strategy, organ: &crate::organs::OrganSpec) -> f64 {
        let Some(filter) = strategy.filter(organ) else {
            return match strategy {
                Strategy::None => dice_from_counts(self.raw_overlap, self.raw_pred, self.ref_count),
                _ => dice_from_counts(self.lr_overlap, self.lr_pred, self.ref_count),
            };
        };
        let volumes: Vec<f64> = self.components.iter().map(|c| c.0).collect();
        let remove = filter.removals(&volumes);
        let (mut pred, mut overlap) = (self.lr_pred, self.lr_overlap);
        for (c, &r) in self.components.iter().zip(&remove) {
            if r {
                pred -= c.1;
                overlap -= c.2;
            }
        }
        dice_from_counts(overlap, pred, self.ref_count)
    }
}

fn counts(pred: &[u8], reference: &[u8], label: u8) -> (u64, u64, u64) {
    let (mut p, mut r, mut both) = (0, 0, 0);
    for (&a, &b) in pred.iter().zip(reference) {
        p += (a == label) as u64;
        r += (b == label) as u64;
        both += (a == label && b == label) as u64;
    }
    (p, r, both)
}

fn summarize(
    pred: &LabelVolume,
    reference: &LabelVolume,
    label: u8,
    organs: &OrganTable,
    connectivity: Connectivity,
) -> Result<OrganCase> {
    let (raw_pred, ref_count, raw_overlap) = counts(pred.as_slice(), reference.as_slice(), label);
    let repaired;
    let after_lr = match organs.pair_of(label) {
        Some(pair) => {
            let mut v = pred.clone();
            fix_left_right_in_place(&mut v, pair, connectivity)?;
            repaired = v;
            &repaired
        }
        None => pred,
    };
    let (lr_pred, _, lr_overlap) = if std::ptr::eq(after_lr, pred) {
        (raw_pred, ref_count, raw_overlap)
    } else {
        counts(after_lr.as_slice(), reference.as_slice(), label)
    };
    let set = connected_components(after_lr, &[label], connectivity);
    let mut agree = vec![0u64; set.len()];
    let ref_labels = reference.as_slice();
    set.for_each_voxel(|idx, id| agree[id] += (ref_labels[idx] == label) as u64);
    let components = set
        .components()
        .iter()
        .zip(agree)
        .map(|(c, a)| (c.volume_mm3, c.voxel_count as u64, a))
        .collect();
    Ok(OrganCase {
        ref_count,
        raw_pred,
        raw_overlap,
        lr_pred,
        lr_overlap,
        components,
    })
}

/// Picks, per organ, the candidate strategy with the highest mean Dice over
/// the given cases. The emitted plan carries minimum volumes measured on
/// `cv_refs` (organs never present keep the table's value).
pub fn optimize_plan(
    cv_preds: &[LabelVolume],
    cv_refs: &[LabelVolume],
    organs: &OrganTable,
    cfg: &OptimizerConfig,
) -> Result<OptimizationResult> {
    check_cases(cv_preds, cv_refs)?;
    cfg.validate()?;
    organs.validate()?;
    for (p, r) in cv_preds.iter().zip(cv_refs) {
        check_pair(p, r)?;
    }

    let mins = observed_min_volumes(cv_refs, organs);
    let mut table = organs.clone();
    for o in &mut table.organs {
        if let Some(&m) = mins.get(&o.label) {
            o.min_volume_mm3 = m;
        }
    }

    let candidates = cfg.candidates();
    let n = cv_preds.len() as f64;
    let mut strategies = BTreeMap::new();
    let mut per_organ_trace = BTreeMap::new();
    for label in table.labels() {
        let organ = table.get(label).expect("label from table");
        let cases: Vec<OrganCase> = cv_preds
            .par_iter()
            .zip(cv_refs.par_iter())
            .map(|(p, r)| summarize(p, r, label, &table, cfg.connectivity))
            .collect::<Result<_>>()?;
        let trace: Vec<TraceEntry> = candidates
            .iter()
            .map(|s| TraceEntry {
                strategy: *s,
                mean_dice: cases.iter().map(|c| c.dice(s, organ)).sum::<f64>() / n,
            })
            .collect();
        let mut best = 0;
        for (i, e) in trace.iter().enumerate() {
            if e.mean_dice > trace[best].mean_dice {
                best = i;
            }
        }
        strategies.insert(label, trace[best].strategy);
        per_organ_trace.insert(label, trace);
    }

    let plan = PPPlan {
        organs: table,
        strategies,
    };
    plan.validate()?;
    Ok(OptimizationResult {
        plan,
        per_organ_trace,
    })
}

/// Evaluation of the raw predictions and of their post-processed versions.
pub fn evaluate_plan(
    preds: &[LabelVolume],
    refs: &[LabelVolume],
    plan: &PPPlan,
    organs: &OrganTable,
    connectivity: Connectivity,
) -> Result<(EvalReport, EvalReport)> {
    plan.validate()?;
    let before = evaluate_cases(preds, refs, organs)?;
    let processed: Vec<LabelVolume> = preds
        .par_iter()
        .map(|p| apply_plan(p, plan, connectivity))
        .collect::<Result<_>>()?;
    let after = evaluate_cases(&processed, refs, organs)?;
    Ok((before, after))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::organs::OrganSpec;
    use crate::volume::Geometry;

    fn blank() -> LabelVolume {
        LabelVolume::zeros(Geometry::new([6, 6, 12], [1.0; 3]).unwrap())
    }

    fn fill(v: &mut LabelVolume, lo: [usize; 3], hi: [usize; 3], label: u8) {
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    v.labels_mut()[[z, y, x]] = label;
                }
            }
        }
    }

    fn table() -> OrganTable {
        OrganTable::new(vec![OrganSpec::new(1, "a", 0.0), OrganSpec::new(5, "b", 0.0)]).unwrap()
    }

    #[test]
    fn perfect_predictions_give_all_none() {
        let mut r = blank();
        fill(&mut r, [0, 0, 0], [3, 3, 3], 1);
        fill(&mut r, [4, 4, 8], [6, 6, 12], 5);
        let res = optimize_plan(&[r.clone()], &[r], &table(), &OptimizerConfig::default()).unwrap();
        assert!(res.plan.strategies.values().all(|s| *s == Strategy::None));
        for trace in res.per_organ_trace.values() {
            assert_eq!(trace[0].strategy, Strategy::None);
            assert_eq!(trace[0].mean_dice, 1.0);
        }
    }

    #[test]
    fn satellite_selects_a_filter() {
        let mut r = blank();
        fill(&mut r, [0, 0, 0], [3, 3, 3], 1);
        let mut p = r.clone();
        p.labels_mut()[[5, 5, 11]] = 1;
        let res = optimize_plan(&[p], &[r], &table(), &OptimizerConfig::default()).unwrap();
        let chosen = res.plan.strategy(1);
        assert_eq!(chosen, Strategy::PP3);
        assert_eq!(res.plan.organs.get(1).unwrap().min_volume_mm3, 27.0);
        let trace = &res.per_organ_trace[&1];
        assert!(trace.iter().find(|e| e.strategy == chosen).unwrap().mean_dice == 1.0);
        assert!(trace[0].mean_dice < 1.0);
    }

    #[test]
    fn cached_dice_matches_direct_application() {
        let mut r = blank();
        fill(&mut r, [0, 0, 0], [3, 3, 3], 1);
        let mut p = r.clone();
        fill(&mut p, [0, 0, 6], [2, 2, 8], 1);
        p.labels_mut()[[5, 5, 11]] = 1;
        p.labels_mut()[[0, 0, 0]] = 0;
        let res = optimize_plan(&[p.clone()], &[r.clone()], &table(), &OptimizerConfig::default()).unwrap();
        for e in &res.per_organ_trace[&1] {
            let out = crate::postprocess::apply_strategy(&p, 1, e.strategy, &res.plan.organs, Connectivity::TwentySix).unwrap();
            let d = crate::metrics::dice(&out, &r, 1).unwrap();
            assert!((d - e.mean_dice).abs() < 1e-12, "{:?}", e.strategy);
        }
    }

    #[test]
    fn trace_csv_layout() {
        let r = blank();
        let cfg = OptimizerConfig {
            rate_grid: vec![0.5],
            strategies: vec![StrategyKind::PP1],
            connectivity: Connectivity::Six,
        };
        let res = optimize_plan(&[r.clone()], &[r], &table(), &cfg).unwrap();
        assert_eq!(
            res.trace_csv(),
            "organ,strategy,rate,mean_dice\n1,None,,1\n1,PP1,0.5,1\n5,None,,1\n5,PP1,0.5,1\n"
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = OptimizerConfig::default();
        cfg.rate_grid = vec![0.5, 0.25];
        assert!(cfg.validate().is_err());
        cfg.rate_grid = vec![0.5, 1.5];
        assert!(cfg.validate().is_err());
        cfg.rate_grid = vec![];
        assert!(cfg.validate().is_err());
        let parsed: OptimizerConfig = serde_json::from_str(r#"{"strategies":["PP3"]}"#).unwrap();
        assert_eq!(parsed.candidates(), vec![Strategy::None, Strategy::PP3]);
    }

    #[test]
    fn none_plan_evaluates_identically() {
        let mut r = blank();
        fill(&mut r, [0, 0, 0], [3, 3, 3], 1);
        let mut p = r.clone();
        p.labels_mut()[[5, 5, 11]] = 1;
        let (before, after) =
            evaluate_plan(&[p], &[r], &PPPlan::none(table()), &table(), Connectivity::TwentySix).unwrap();
        assert_eq!(before, after);
    }
}
