//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use ndarray::Array3;
use organpp::organs::Side;
use organpp::phantom::{PhantomOrgan, PhantomSpec};
use organpp::{
    apply_strategy, Connectivity, Geometry, LabelVolume, OrganTable, Strategy,
};
use rand_xoshiro::rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub struct TestRng(Xoshiro256PlusPlus);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in `lo..=hi`.
    pub fn int(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.0.next_u64() % (hi - lo + 1) as u64) as usize
    }

    pub fn real(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }
}

/// Random labels in `0..=max_label`, background with probability `p_bg`.
pub fn random_labels(rng: &mut TestRng, shape: [usize; 3], spacing: [f64; 3], max_label: u8, p_bg: f64) -> LabelVolume {
    let g = Geometry::new(shape, spacing).unwrap();
    let data = Array3::from_shape_fn(shape, |_| {
        if rng.unit() < p_bg {
            0
        } else {
            rng.int(1, max_label as usize) as u8
        }
    });
    LabelVolume::new(g, data).unwrap()
}

fn is_neighbor(conn: Connectivity, d: [isize; 3]) -> bool {
    let l1: isize = d.iter().map(|v| v.abs()).sum();
    let linf = d.iter().map(|v| v.abs()).max().unwrap();
    if linf != 1 {
        return false;
    }
    match conn {
        Connectivity::Six => l1 == 1,
        Connectivity::Eighteen => l1 <= 2,
        Connectivity::TwentySix => true,
    }
}

/// Flood fill: components of same-label voxels among `keys`, each as a
/// sorted list of linear indices, ordered by their first voxel.
pub fn bfs_components(v: &LabelVolume, keys: &[u8], conn: Connectivity) -> Vec<(u8, Vec<usize>)> {
    let [nz, ny, nx] = v.geometry().shape();
    let labels = v.as_slice();
    let mut seen = vec![false; labels.len()];
    let mut out = Vec::new();
    for start in 0..labels.len() {
        let l = labels[start];
        if seen[start] || !keys.contains(&l) {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![];
        let mut q = VecDeque::from([start]);
        while let Some(i) = q.pop_front() {
            comp.push(i);
            let (z, y, x) = ((i / (ny * nx)) as isize, ((i / nx) % ny) as isize, (i % nx) as isize);
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if !is_neighbor(conn, [dz, dy, dx]) {
                            continue;
                        }
                        let (a, b, c) = (z + dz, y + dy, x + dx);
                        if a < 0 || b < 0 || c < 0 || a >= nz as isize || b >= ny as isize || c >= nx as isize {
                            continue;
                        }
                        let j = (a as usize * ny + b as usize) * nx + c as usize;
                        if !seen[j] && labels[j] == l {
                            seen[j] = true;
                            q.push_back(j);
                        }
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push((l, comp));
    }
    out
}

/// Per-voxel Dice with the both-empty = 1 convention.
pub fn scalar_dice(pred: &LabelVolume, reference: &LabelVolume, label: u8) -> f64 {
    let p = pred.as_slice();
    let r = reference.as_slice();
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sr = 0.0;
    for i in 0..p.len() {
        if p[i] == label {
            sp += 1.0;
        }
        if r[i] == label {
            sr += 1.0;
        }
        if p[i] == label && r[i] == label {
            inter += 1.0;
        }
    }
    if sp + sr == 0.0 {
        1.0
    } else {
        2.0 * inter / (sp + sr)
    }
}

/// `[reference][prediction]` voxel counts.
pub fn brute_tally(pred: &LabelVolume, reference: &LabelVolume, classes: usize) -> Vec<Vec<u64>> {
    let mut t = vec![vec![0u64; classes]; classes];
    for (&p, &r) in pred.as_slice().iter().zip(reference.as_slice()) {
        t[r as usize][p as usize] += 1;
    }
    t
}

/// Smallest present-organ volume per label over `refs`, straight from voxel counts.
pub fn min_volumes(refs: &[LabelVolume], organs: &OrganTable) -> OrganTable {
    let mut table = organs.clone();
    for o in &mut table.organs {
        let mut best = f64::INFINITY;
        for r in refs {
            let n = r.count(o.label);
            if n > 0 {
                best = best.min(n as f64 * r.geometry().voxel_volume());
            }
        }
        if best.is_finite() {
            o.min_volume_mm3 = best;
        }
    }
    table
}

pub fn candidate_grid(rates: &[f64]) -> Vec<Strategy> {
    let mut out = vec![Strategy::None, Strategy::PP4, Strategy::PP3];
    out.extend(rates.iter().map(|&rate| Strategy::PP1 { rate }));
    out.extend(rates.iter().map(|&rate| Strategy::PP2 { rate }));
    out
}

/// Full grid search by applying every candidate and scoring it per voxel:
/// `label -> (chosen, [(candidate, mean dice)])`.
pub fn exhaustive_grid(
    preds: &[LabelVolume],
    refs: &[LabelVolume],
    organs: &OrganTable,
    rates: &[f64],
    conn: Connectivity,
) -> Vec<(u8, Strategy, Vec<(Strategy, f64)>)> {
    let table = min_volumes(refs, organs);
    let grid = candidate_grid(rates);
    let mut out = Vec::new();
    for label in table.labels() {
        let mut scores = Vec::new();
        for &s in &grid {
            let mut total = 0.0;
            for (p, r) in preds.iter().zip(refs) {
                let processed = apply_strategy(p, label, s, &table, conn).unwrap();
                total += scalar_dice(&processed, r, label);
            }
            scores.push((s, total / preds.len() as f64));
        }
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i].1 > scores[best].1 {
                best = i;
            }
        }
        out.push((label, scores[best].0, scores));
    }
    out
}

fn organ(label: u8, radius: [f64; 2], side: Option<Side>, partner: Option<u8>) -> PhantomOrgan {
    PhantomOrgan {
        label_id: label,
        blob_count: 1,
        radius_range_mm: radius,
        lr_side: side,
        lr_partner: partner,
    }
}

/// Fifteen-organ phantom in the AMOS label layout (kidneys 2/3, adrenals 11/12).
pub fn amos_like_spec(seed: u64, shape: [usize; 3], spacing: [f64; 3], radius: [f64; 2]) -> PhantomSpec {
    let organs = (1..=15u8)
        .map(|l| match l {
            2 => organ(2, radius, Some(Side::Right), Some(3)),
            3 => organ(3, radius, Some(Side::Left), Some(2)),
            11 => organ(11, radius, Some(Side::Right), Some(12)),
            12 => organ(12, radius, Some(Side::Left), Some(11)),
            _ => organ(l, radius, None, None),
        })
        .collect();
    PhantomSpec {
        seed,
        shape,
        spacing,
        organs,
        defects: vec![],
        num_classes: Some(16),
        prob_fixtures: 0,
        intensity_noise: 5.0,
    }
}

/// Six organs with one lateral pair, for optimizer runs.
pub fn small_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        seed,
        shape: [20, 32, 40],
        spacing: [2.0, 1.0, 1.0],
        organs: vec![
            organ(1, [5.0, 8.0], None, None),
            organ(2, [3.0, 6.0], Some(Side::Right), Some(3)),
            organ(3, [3.0, 6.0], Some(Side::Left), Some(2)),
            organ(4, [4.0, 6.0], None, None),
            organ(5, [3.0, 5.0], None, None),
            organ(6, [3.0, 4.0], None, None),
        ],
        defects: vec![],
        num_classes: None,
        prob_fixtures: 0,
        intensity_noise: 5.0,
    }
}
