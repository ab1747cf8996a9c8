//! Voxel-grid spatial index with a bidirectional anchor <-> voxel map, and
//! patch extraction over voxel sets.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::scene::{PrimitiveId, Scene};
use crate::{Error, Result};

/// Integer cell coordinates `floor((p - origin) / size)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VoxelKey(pub i64, pub i64, pub i64);

impl VoxelKey {
    pub fn offset(self, d: (i64, i64, i64)) -> VoxelKey {
        VoxelKey(self.0 + d.0, self.1 + d.1, self.2 + d.2)
    }
}

/// Anchor classes assigned by the locator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Missing,
    Incomplete,
    Intact,
}

/// Half-open cubic cells `[k * size, (k + 1) * size)` relative to `origin`.
#[derive(Debug, Clone)]
pub struct VoxelIndex {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    voxels: BTreeMap<VoxelKey, Vec<PrimitiveId>>,
    anchors: HashMap<PrimitiveId, VoxelKey>,
}

/// Cell containing `p` for a grid with the given origin and edge length.
#[inline]
pub fn key_for(p: &Vector3<f64>, origin: &Vector3<f64>, size: f64) -> VoxelKey {
    VoxelKey(
        ((p.x - origin.x) / size).floor() as i64,
        ((p.y - origin.y) / size).floor() as i64,
        ((p.z - origin.z) / size).floor() as i64,
    )
}

/// Cell containing `position` in `index`'s grid.
pub fn voxel_of(position: &Vector3<f64>, index: &VoxelIndex) -> VoxelKey {
    key_for(position, &index.origin, index.voxel_size)
}

/// Component-wise floor of the scene's bounding-box minimum, snapped to the
/// voxel size. Zero for an empty scene.
pub fn default_origin(scene: &Scene, voxel_size: f64) -> Vector3<f64> {
    match scene.bounds() {
        Some((lo, _)) => lo.map(|v| (v / voxel_size).floor() * voxel_size),
        None => Vector3::zeros(),
    }
}

/// Index every primitive of `scene` by position. `origin = None` uses
/// [`default_origin`].
pub fn build_index(scene: &Scene, voxel_size: f64, origin: Option<Vector3<f64>>) -> Result<VoxelIndex> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::Config(format!("voxel size must be positive, got {voxel_size}")));
    }
    for p in &scene.primitives {
        if !p.position.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(format!("primitive {} has a non-finite position", p.id)));
        }
    }
    let origin = origin.unwrap_or_else(|| default_origin(scene, voxel_size));
    let mut voxels: BTreeMap<VoxelKey, Vec<PrimitiveId>> = BTreeMap::new();
    let mut anchors = HashMap::with_capacity(scene.primitives.len());
    for p in &scene.primitives {
        let key = key_for(&p.position, &origin, voxel_size);
        voxels.entry(key).or_default().push(p.id);
        anchors.insert(p.id, key);
    }
    for ids in voxels.values_mut() {
        ids.sort_unstable();
    }
    Ok(VoxelIndex {
        origin,
        voxel_size,
        voxels,
        anchors,
    })
}

impl VoxelIndex {
    pub fn key_of(&self, p: &Vector3<f64>) -> VoxelKey {
        key_for(p, &self.origin, self.voxel_size)
    }

    /// Sorted anchor ids in a voxel; empty if unoccupied.
    pub fn anchors_in(&self, key: &VoxelKey) -> &[PrimitiveId] {
        self.voxels.get(key).map_or(&[], |v| v.as_slice())
    }

    pub fn voxel_of_anchor(&self, id: PrimitiveId) -> Option<VoxelKey> {
        self.anchors.get(&id).copied()
    }

    pub fn is_occupied(&self, key: &VoxelKey) -> bool {
        self.voxels.contains_key(key)
    }

    /// Occupied voxels in key order.
    pub fn occupied(&self) -> impl Iterator<Item = (&VoxelKey, &Vec<PrimitiveId>)> {
        self.voxels.iter()
    }

    pub fn occupied_count(&self) -> usize {
        self.voxels.len()
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors.len()
    }

    pub fn center(&self, key: &VoxelKey) -> Vector3<f64> {
        self.origin + Vector3::new(key.0 as f64 + 0.5, key.1 as f64 + 0.5, key.2 as f64 + 0.5) * self.voxel_size
    }

    /// Inclusive-exclusive world bounds of a cell.
    pub fn bounds(&self, key: &VoxelKey) -> (Vector3<f64>, Vector3<f64>) {
        let lo = self.origin + Vector3::new(key.0 as f64, key.1 as f64, key.2 as f64) * self.voxel_size;
        (lo, lo + Vector3::repeat(self.voxel_size))
    }
}

/// A set of voxels with their member anchors and, once classified, labels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Patch {
    pub voxels: BTreeSet<VoxelKey>,
    /// Sorted ids of all anchors in `voxels`.
    pub anchor_ids: Vec<PrimitiveId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<BTreeMap<PrimitiveId, Label>>,
}

impl Patch {
    pub fn is_empty(&self) -> bool {
        self.anchor_ids.is_empty()
    }

    pub fn label(&self, id: PrimitiveId) -> Option<Label> {
        self.labels.as_ref().and_then(|l| l.get(&id).copied())
    }

    /// Anchors labeled intact, in id order.
    pub fn intact(&self) -> Vec<PrimitiveId> {
        self.ids_with(Label::Intact)
    }

    pub fn ids_with(&self, label: Label) -> Vec<PrimitiveId> {
        self.labels
            .as_ref()
            .map(|l| l.iter().filter(|(_, v)| **v == label).map(|(k, _)| *k).collect())
            .unwrap_or_default()
    }
}

/// Gather all anchors of `voxels` into a patch.
pub fn extract_patch(index: &VoxelIndex, voxels: &BTreeSet<VoxelKey>) -> Patch {
    let mut anchor_ids: Vec<PrimitiveId> = voxels.iter().flat_map(|k| index.anchors_in(k).iter().copied()).collect();
    anchor_ids.sort_unstable();
    Patch {
        voxels: voxels.clone(),
        anchor_ids,
        labels: None,
    }
}

/// Split a voxel set into 26-connected components, each sorted, ordered by
/// smallest key.
pub fn connected_components(voxels: &BTreeSet<VoxelKey>) -> Vec<BTreeSet<VoxelKey>> {
    let mut seen: BTreeSet<VoxelKey> = BTreeSet::new();
    let mut out = Vec::new();
    for &start in voxels {
        if seen.contains(&start) {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut stack = vec![start];
        seen.insert(start);
        while let Some(k) = stack.pop() {
            comp.insert(k);
            for di in -1..=1 {
                for dj in -1..=1 {
                    for dk in -1..=1 {
                        let n = k.offset((di, dj, dk));
                        if voxels.contains(&n) && seen.insert(n) {
                            stack.push(n);
                        }
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}
