//! 3D connected-component labeling with physical volume and centroid accounting.
//!
//! Labeling is a two-pass raster scan over a union-find forest of provisional
//! labels. Union always keeps the smaller root, so every set is rooted at the
//! provisional label of its first voxel in raster order; numbering roots in
//! ascending order therefore orders components by their minimal linear index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::volume::{Geometry, LabelVolume};

/// Voxel neighborhood used to decide adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Face neighbors.
    Six,
    /// Face and edge neighbors.
    Eighteen,
    /// Face, edge and corner neighbors.
    #[default]
    TwentySix,
}

// Neighbors preceding the centre voxel in raster order, as (dz, dy, dx).
const BACKWARD_6: [[isize; 3]; 3] = [[-1, 0, 0], [0, -1, 0], [0, 0, -1]];
const BACKWARD_18: [[isize; 3]; 9] = [
    [-1, -1, 0],
    [-1, 0, -1],
    [-1, 0, 0],
    [-1, 0, 1],
    [-1, 1, 0],
    [0, -1, -1],
    [0, -1, 0],
    [0, -1, 1],
    [0, 0, -1],
];
const BACKWARD_26: [[isize; 3]; 13] = [
    [-1, -1, -1],
    [-1, -1, 0],
    [-1, -1, 1],
    [-1, 0, -1],
    [-1, 0, 0],
    [-1, 0, 1],
    [-1, 1, -1],
    [-1, 1, 0],
    [-1, 1, 1],
    [0, -1, -1],
    [0, -1, 0],
    [0, -1, 1],
    [0, 0, -1],
];

impl Connectivity {
    pub fn as_u8(self) -> u8 {
        match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }

    /// The half of the neighborhood that precedes a voxel in raster order.
    pub fn backward_offsets(self) -> &'static [[isize; 3]] {
        match self {
            Connectivity::Six => &BACKWARD_6,
            Connectivity::Eighteen => &BACKWARD_18,
            Connectivity::TwentySix => &BACKWARD_26,
        }
    }

    /// Whether two distinct voxels at offset (dz, dy, dx) are neighbors.
    pub fn is_neighbor_offset(self, d: [isize; 3]) -> bool {
        let nonzero = d.iter().filter(|&&v| v != 0).count();
        d.iter().all(|v| v.abs() <= 1)
            && nonzero > 0
            && match self {
                Connectivity::Six => nonzero == 1,
                Connectivity::Eighteen => nonzero <= 2,
                Connectivity::TwentySix => true,
            }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self, Error> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::InvalidConfig(format!(
                "connectivity must be 6, 18 or 26, got {other}"
            ))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        c.as_u8()
    }
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let v: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("connectivity '{s}' is not a number")))?;
        Connectivity::try_from(v)
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// Position in the set; components are ordered by `first_index`.
    pub id: usize,
    /// Label the component was extracted for. Pooled components carry the
    /// first label of the pair; see `label_counts` for the split.
    pub label: u8,
    pub voxel_count: usize,
    pub volume_mm3: f64,
    /// Unweighted mean of voxel centres in patient coordinates (mm).
    pub centroid_mm: [f64; 3],
    /// Inclusive (min, max) voxel index per (z, y, x) axis.
    pub bbox: [[usize; 2]; 3],
    /// Minimal linear voxel index.
    pub first_index: usize,
    /// Voxel count per original label, ascending by label.
    pub label_counts: Vec<(u8, usize)>,
}

impl Component {
    pub fn count_of(&self, label: u8) -> usize {
        self.label_counts
            .iter()
            .find(|(l, _)| *l == label)
            .map_or(0, |(_, n)| *n)
    }
}

/// Debug dump record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub label: u8,
    pub voxels: usize,
    pub mm3: f64,
    pub centroid: [f64; 3],
    pub bbox: [[usize; 2]; 3],
}

#[derive(Debug, Clone)]
pub struct ComponentSet {
    components: Vec<Component>,
    volume_shape: [usize; 3],
    /// Sub-box of the volume that the map covers.
    region_origin: [usize; 3],
    region_shape: [usize; 3],
    /// Component id + 1 per region voxel, 0 for unlabeled.
    map: Vec<u32>,
}

impl ComponentSet {
    fn empty(volume_shape: [usize; 3]) -> Self {
        ComponentSet {
            components: Vec::new(),
            volume_shape,
            region_origin: [0; 3],
            region_shape: [0; 3],
            map: Vec::new(),
        }
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn of_label(&self, label: u8) -> impl Iterator<Item = &Component> {
        self.components.iter().filter(move |c| c.label == label)
    }

    /// Component containing the voxel at (z, y, x), if any.
    pub fn component_at(&self, index: [usize; 3]) -> Option<usize> {
        let mut local = 0;
        for a in 0..3 {
            let i = index[a].checked_sub(self.region_origin[a])?;
            if i >= self.region_shape[a] {
                return None;
            }
            local = local * self.region_shape[a] + i;
        }
        match self.map[local] {
            0 => None,
            id => Some(id as usize - 1),
        }
    }

    /// Visits every labeled voxel as (linear index into the volume, component id).
    pub fn for_each_voxel(&self, mut f: impl FnMut(usize, usize)) {
        let [_, vy, vx] = self.volume_shape;
        let [rz, ry, rx] = self.region_shape;
        let [oz, oy, ox] = self.region_origin;
        let mut local = 0;
        for z in 0..rz {
            for y in 0..ry {
                let row = ((z + oz) * vy + (y + oy)) * vx + ox;
                for x in 0..rx {
                    let id = self.map[local];
                    if id != 0 {
                        f(row + x, id as usize - 1);
                    }
                    local += 1;
                }
            }
        }
    }

    /// Linear volume indices of one component, ascending.
    pub fn voxels(&self, id: usize) -> Vec<usize> {
        let c = &self.components[id];
        let [_, vy, vx] = self.volume_shape;
        let [_, ry, rx] = self.region_shape;
        let [oz, oy, ox] = self.region_origin;
        let tag = id as u32 + 1;
        let mut out = Vec::with_capacity(c.voxel_count);
        for z in c.bbox[0][0]..=c.bbox[0][1] {
            for y in c.bbox[1][0]..=c.bbox[1][1] {
                for x in c.bbox[2][0]..=c.bbox[2][1] {
                    let local = ((z - oz) * ry + (y - oy)) * rx + (x - ox);
                    if self.map[local] == tag {
                        out.push((z * vy + y) * vx + x);
                    }
                }
            }
        }
        out
    }

    pub fn records(&self) -> Vec<ComponentRecord> {
        self.components
            .iter()
            .map(|c| ComponentRecord {
                label: c.label,
                voxels: c.voxel_count,
                mm3: c.volume_mm3,
                centroid: c.centroid_mm,
                bbox: c.bbox,
            })
            .collect()
    }
}

/// Decomposes every label in `labels` into maximal connected regions.
pub fn connected_components(
    volume: &LabelVolume,
    labels: &[u8],
    connectivity: Connectivity,
) -> ComponentSet {
    let mut keys = [0u8; 256];
    for &l in labels {
        if l != 0 {
            keys[l as usize] = l;
        }
    }
    label_regions(volume, &keys, connectivity, |k| k)
}

/// Components of the union of two labels; each records its per-label split.
pub fn pooled_components(
    volume: &LabelVolume,
    pair: (u8, u8),
    connectivity: Connectivity,
) -> ComponentSet {
    let (a, b) = pair;
    let mut keys = [0u8; 256];
    for l in [a, b] {
        if l != 0 {
            keys[l as usize] = 1;
        }
    }
    let label = if a != 0 { a } else { b };
    label_regions(volume, &keys, connectivity, |_| label)
}

struct Forest {
    parent: Vec<u32>,
}

impl Forest {
    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let ra = self.find(a);
        let rb = self.find(b);
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

/// Bounding box (inclusive) of voxels whose key is nonzero.
fn keyed_bbox(labels: &[u8], shape: [usize; 3], keys: &[u8; 256]) -> Option<[[usize; 2]; 3]> {
    let [nz, ny, nx] = shape;
    let mut bbox: Option<[[usize; 2]; 3]> = None;
    for z in 0..nz {
        for y in 0..ny {
            let row = &labels[(z * ny + y) * nx..(z * ny + y + 1) * nx];
            let Some(x0) = row.iter().position(|&l| keys[l as usize] != 0) else {
                continue;
            };
            let x1 = row.iter().rposition(|&l| keys[l as usize] != 0).unwrap();
            let b = bbox.get_or_insert([[z, z], [y, y], [x0, x1]]);
            b[0][1] = z;
            b[1][0] = b[1][0].min(y);
            b[1][1] = b[1][1].max(y);
            b[2][0] = b[2][0].min(x0);
            b[2][1] = b[2][1].max(x1);
        }
    }
    bbox
}

fn label_regions(
    volume: &LabelVolume,
    keys: &[u8; 256],
    connectivity: Connectivity,
    component_label: impl Fn(u8) -> u8,
) -> ComponentSet {
    let geometry: &Geometry = volume.geometry();
    let shape = geometry.shape();
    let labels = volume.as_slice();
    let Some(bbox) = keyed_bbox(labels, shape, keys) else {
        return ComponentSet::empty(shape);
    };

    let [_, vy, vx] = shape;
    let origin = [bbox[0][0], bbox[1][0], bbox[2][0]];
    let region = [
        bbox[0][1] - bbox[0][0] + 1,
        bbox[1][1] - bbox[1][0] + 1,
        bbox[2][1] - bbox[2][0] + 1,
    ];
    let [rz, ry, rx] = region;
    let offsets: Vec<([isize; 3], isize, isize)> = connectivity
        .backward_offsets()
        .iter()
        .map(|&d| {
            let vol_delta = (d[0] * vy as isize + d[1]) * vx as isize + d[2];
            let map_delta = (d[0] * ry as isize + d[1]) * rx as isize + d[2];
            (d, vol_delta, map_delta)
        })
        .collect();

    // First pass: provisional labels and equivalences.
    let mut map = vec![0u32; rz * ry * rx];
    let mut forest = Forest { parent: vec![0] };
    let mut local = 0usize;
    for z in 0..rz {
        for y in 0..ry {
            let row = ((z + origin[0]) * vy + (y + origin[1])) * vx + origin[2];
            for x in 0..rx {
                let vidx = row + x;
                let key = keys[labels[vidx] as usize];
                if key == 0 {
                    local += 1;
                    continue;
                }
                let mut current = 0u32;
                for &(d, vol_delta, map_delta) in &offsets {
                    if (d[0] < 0 && z == 0)
                        || (d[1] < 0 && y == 0)
                        || (d[1] > 0 && y + 1 == ry)
                        || (d[2] < 0 && x == 0)
                        || (d[2] > 0 && x + 1 == rx)
                    {
                        continue;
                    }
                    let nv = (vidx as isize + vol_delta) as usize;
                    if keys[labels[nv] as usize] != key {
                        continue;
                    }
                    let neighbor = map[(local as isize + map_delta) as usize];
                    current = if current == 0 {
                        neighbor
                    } else if neighbor != current {
                        forest.union(current, neighbor)
                    } else {
                        current
                    };
                }
                map[local] = if current == 0 { forest.make() } else { current };
                local += 1;
            }
        }
    }

    // Compact numbering: roots in ascending provisional order.
    let provisional = forest.parent.len();
    let mut compact = vec![0u32; provisional];
    let mut count = 0u32;
    for p in 1..provisional as u32 {
        let root = forest.find(p);
        if root == p {
            count += 1;
            compact[p as usize] = count;
        } else {
            compact[p as usize] = compact[root as usize];
        }
    }

    // Second pass: final ids and statistics.
    struct Acc {
        count: usize,
        sum: [u64; 3],
        bbox: [[usize; 2]; 3],
        first: usize,
        label: u8,
        by_label: Vec<(u8, usize)>,
    }
    let mut accs: Vec<Acc> = Vec::with_capacity(count as usize);
    let mut local = 0usize;
    for z in 0..rz {
        let gz = z + origin[0];
        for y in 0..ry {
            let gy = y + origin[1];
            let row = (gz * vy + gy) * vx + origin[2];
            for x in 0..rx {
                let p = map[local];
                if p != 0 {
                    let id = compact[p as usize];
                    map[local] = id;
                    let gx = x + origin[2];
                    let l = labels[row + x];
                    let i = id as usize - 1;
                    if i == accs.len() {
                        accs.push(Acc {
                            count: 0,
                            sum: [0; 3],
                            bbox: [[gz, gz], [gy, gy], [gx, gx]],
                            first: row + x,
                            label: component_label(l),
                            by_label: Vec::with_capacity(2),
                        });
                    }
                    let a = &mut accs[i];
                    a.count += 1;
                    a.sum[0] += gz as u64;
                    a.sum[1] += gy as u64;
                    a.sum[2] += gx as u64;
                    a.bbox[0][1] = gz;
                    a.bbox[1][0] = a.bbox[1][0].min(gy);
                    a.bbox[1][1] = a.bbox[1][1].max(gy);
                    a.bbox[2][0] = a.bbox[2][0].min(gx);
                    a.bbox[2][1] = a.bbox[2][1].max(gx);
                    match a.by_label.iter_mut().find(|(bl, _)| *bl == l) {
                        Some(entry) => entry.1 += 1,
                        None => a.by_label.push((l, 1)),
                    }
                }
                local += 1;
            }
        }
    }

    let voxel_volume = geometry.voxel_volume();
    let components = accs
        .into_iter()
        .enumerate()
        .map(|(id, mut a)| {
            let n = a.count as f64;
            let mean = [a.sum[0] as f64 / n, a.sum[1] as f64 / n, a.sum[2] as f64 / n];
            a.by_label.sort_unstable();
            Component {
                id,
                label: a.label,
                voxel_count: a.count,
                volume_mm3: a.count as f64 * voxel_volume,
                centroid_mm: geometry.to_patient(mean),
                bbox: a.bbox,
                first_index: a.first,
                label_counts: a.by_label,
            }
        })
        .collect();

    ComponentSet {
        components,
        volume_shape: shape,
        region_origin: origin,
        region_shape: region,
        map,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn vol(shape: [usize; 3], spacing: [f64; 3], set: &[([usize; 3], u8)]) -> LabelVolume {
        let mut v = LabelVolume::zeros(Geometry::new(shape, spacing).unwrap());
        for &(i, l) in set {
            v.labels_mut()[i] = l;
        }
        v
    }

    #[test]
    fn empty_volume_has_no_components() {
        let v = vol([4, 4, 4], [1.0; 3], &[]);
        assert!(connected_components(&v, &[1, 2, 3], Connectivity::TwentySix).is_empty());
    }

    #[test]
    fn single_voxel_component() {
        let v = vol([3, 3, 3], [1.0; 3], &[([1, 2, 0], 3)]);
        let set = connected_components(&v, &[3], Connectivity::TwentySix);
        assert_eq!(set.len(), 1);
        let c = &set.components()[0];
        assert_eq!((c.label, c.voxel_count, c.volume_mm3), (3, 1, 1.0));
        assert_eq!(c.centroid_mm, v.geometry().to_patient([1.0, 2.0, 0.0]));
        assert_eq!(set.voxels(0), vec![9 + 6]);
    }

    #[test]
    fn diagonal_voxels_split_under_6_and_join_under_26() {
        let v = vol([2, 2, 2], [1.0; 3], &[([0, 0, 0], 1), ([1, 1, 1], 1)]);
        assert_eq!(connected_components(&v, &[1], Connectivity::Six).len(), 2);
        assert_eq!(connected_components(&v, &[1], Connectivity::Eighteen).len(), 2);
        assert_eq!(connected_components(&v, &[1], Connectivity::TwentySix).len(), 1);
        let e = vol([2, 2, 2], [1.0; 3], &[([0, 0, 0], 1), ([0, 1, 1], 1)]);
        assert_eq!(connected_components(&e, &[1], Connectivity::Six).len(), 2);
        assert_eq!(connected_components(&e, &[1], Connectivity::Eighteen).len(), 1);
    }

    #[test]
    fn different_labels_never_merge() {
        let v = vol([1, 1, 2], [1.0; 3], &[([0, 0, 0], 1), ([0, 0, 1], 2)]);
        let set = connected_components(&v, &[1, 2], Connectivity::TwentySix);
        assert_eq!(set.len(), 2);
        assert_eq!(set.components()[0].label, 1);
        assert_eq!(set.components()[1].label, 2);
    }

    #[test]
    fn components_are_ordered_by_first_voxel() {
        // a U-shape whose two arms meet late in raster order
        let v = vol(
            [1, 3, 3],
            [1.0; 3],
            &[([0, 0, 0], 1), ([0, 0, 2], 1), ([0, 1, 0], 1), ([0, 1, 2], 1), ([0, 2, 0], 1), ([0, 2, 1], 1), ([0, 2, 2], 1), ([0, 0, 1], 2)],
        );
        let set = connected_components(&v, &[1, 2], Connectivity::Six);
        assert_eq!(set.len(), 2);
        assert_eq!(set.components()[0].first_index, 0);
        assert_eq!(set.components()[0].voxel_count, 7);
        assert_eq!(set.components()[1].label, 2);
    }

    #[test]
    fn pooled_touching_blobs_form_one_component() {
        let v = vol([1, 2, 4], [1.0; 3], &[([0, 0, 0], 2), ([0, 0, 1], 2), ([0, 0, 2], 3), ([0, 1, 3], 3)]);
        let set = pooled_components(&v, (2, 3), Connectivity::TwentySix);
        assert_eq!(set.len(), 1);
        let c = &set.components()[0];
        assert_eq!((c.count_of(2), c.count_of(3)), (2, 2));
    }

    #[test]
    fn pooled_distant_blobs_stay_apart() {
        let v = vol([1, 1, 5], [1.0; 3], &[([0, 0, 0], 2), ([0, 0, 4], 3)]);
        let set = pooled_components(&v, (2, 3), Connectivity::TwentySix);
        assert_eq!(set.len(), 2);
        assert_eq!(set.components()[0].label_counts, vec![(2, 1)]);
        assert_eq!(set.components()[1].label_counts, vec![(3, 1)]);
    }

    #[test]
    fn volume_uses_spacing_product() {
        let v = vol([2, 2, 2], [2.0, 1.0, 0.5], &[([0, 0, 0], 1), ([0, 0, 1], 1)]);
        let set = connected_components(&v, &[1], Connectivity::Six);
        assert_eq!(set.components()[0].volume_mm3, 2.0);
    }

    #[test]
    fn component_lookup_and_dump() {
        let v = vol([2, 3, 3], [1.0; 3], &[([1, 1, 1], 4), ([1, 2, 2], 4)]);
        let set = connected_components(&v, &[4], Connectivity::TwentySix);
        assert_eq!(set.component_at([1, 2, 2]), Some(0));
        assert_eq!(set.component_at([0, 0, 0]), None);
        let recs = set.records();
        assert_eq!(recs[0].bbox, [[1, 1], [1, 2], [1, 2]]);
        let json = serde_json::to_string(&recs).unwrap();
        assert!(json.contains("\"mm3\":2.0"));
    }

    #[test]
    fn connectivity_parses_and_rejects() {
        assert_eq!("18".parse::<Connectivity>().unwrap(), Connectivity::Eighteen);
        assert!("8".parse::<Connectivity>().is_err());
        assert_eq!(serde_json::to_string(&Connectivity::TwentySix).unwrap(), "26");
        assert_eq!(Connectivity::default(), Connectivity::TwentySix);
    }

    #[test]
    fn full_volume_component() {
        let g = Geometry::new([3, 4, 5], [1.0; 3]).unwrap();
        let v = LabelVolume::new(g, Array3::from_elem((3, 4, 5), 7)).unwrap();
        let set = connected_components(&v, &[7], Connectivity::Six);
        assert_eq!(set.len(), 1);
        assert_eq!(set.components()[0].voxel_count, 60);
        let mut n = 0;
        set.for_each_voxel(|_, id| {
            assert_eq!(id, 0);
            n += 1;
        });
        assert_eq!(n, 60);
    }
}
