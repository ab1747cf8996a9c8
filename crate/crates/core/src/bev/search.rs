//! Candidate source placements on the BEV grid, feature affinity between a
//! target patch and a placed source, and best-source selection with an
//! exhaustive reference search.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use nalgebra::{Rotation3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GroundManifold, CORRIDOR_HALF_WIDTH};
use crate::index::{Patch, VoxelIndex, VoxelKey};
use crate::raster::Raster;
use crate::render::{project_points, render, Channels, RenderOptions};
use crate::scene::{Camera, PrimitiveId, Scene};
use crate::{Error, Result};

/// Scores closer than this are ties.
pub const SCORE_TIE: f64 = 1e-9;
/// Offsets closer than this (meters) are ties.
const OFFSET_TIE: f64 = 1e-6;
/// A frame scores a point set only if at least this fraction is in view.
pub const MIN_VISIBLE_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Longitudinal half-extent of the search rectangle, meters.
    pub span_u: f64,
    /// Lateral half-extent, meters.
    pub span_v: f64,
    /// Grid step in meters; `None` = the voxel size.
    pub stride: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            span_u: 30.0,
            span_v: 5.0,
            stride: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.span_u >= 0.0 && self.span_v >= 0.0) {
            return Err(Error::Config(format!("search spans must be >= 0, got {} / {}", self.span_u, self.span_v)));
        }
        if let Some(s) = self.stride {
            if !(s > 0.0) {
                return Err(Error::Config(format!("search.stride must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn stride_for(&self, voxel_size: f64) -> f64 {
        self.stride.unwrap_or(voxel_size)
    }
}

/// Rigid map `x -> R_z(theta) x + translation` taking source material onto
/// the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidMap {
    /// Rotation about the vertical axis, radians.
    pub theta: f64,
    pub translation: [f64; 3],
}

impl RigidMap {
    pub fn translation(t: Vector3<f64>) -> Self {
        RigidMap {
            theta: 0.0,
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), self.theta)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + Vector3::from(self.translation)
    }

    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().inverse() * (p - Vector3::from(self.translation))
    }
}

/// A source patch placed over a target patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePlacement {
    /// `(target voxel, source voxel)` in target key order.
    pub pairs: Vec<(VoxelKey, VoxelKey)>,
    /// Maps source space onto target space.
    pub map: RigidMap,
    /// BEV offset of the source from the target, meters.
    pub delta_u: f64,
    pub delta_v: f64,
}

impl CandidatePlacement {
    /// Source voxels in ascending key order.
    pub fn source_voxels(&self) -> Vec<VoxelKey> {
        let mut v: Vec<VoxelKey> = self.pairs.iter().map(|p| p.1).collect();
        v.sort_unstable();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityRecord {
    pub patch: usize,
    pub placement: CandidatePlacement,
    /// Cosine of the aggregated target and source features, in [-1, 1].
    pub score: f64,
    pub target_frame: u32,
    pub source_frame: u32,
}

/// Full-resolution rendered feature maps, rendered at most once per frame
/// and shared read-only afterwards.
pub struct FeatureCache<'a> {
    scene: &'a Scene,
    maps: Vec<OnceLock<Raster>>,
}

impl<'a> FeatureCache<'a> {
    /// `scene` should already have the targets removed.
    pub fn new(scene: &'a Scene) -> Self {
        FeatureCache {
            scene,
            maps: (0..scene.cameras.len()).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn scene(&self) -> &Scene {
        self.scene
    }

    /// Feature map of the camera at position `i` in `scene.cameras`.
    ///
    /// The render runs outside the cell: the renderer is itself parallel,
    /// and a worker waiting inside `get_or_init` could steal a job that
    /// asks for the same frame and block on it forever. Concurrent first
    /// requests may render twice; renders are deterministic, so whichever
    /// copy lands first is identical to the other.
    pub fn get(&self, i: usize) -> &Raster {
        if let Some(map) = self.maps[i].get() {
            return map;
        }
        let out = render(self.scene, &self.scene.cameras[i], &RenderOptions::new(Channels::FEATURE));
        let _ = self.maps[i].set(out.feature.expect("feature channel requested"));
        self.maps[i].get().expect("set above")
    }
}

/// BEV reference point of a patch: centroid of its voxel centers.
fn patch_reference(voxels: &BTreeSet<VoxelKey>, index: &VoxelIndex, manifold: &GroundManifold) -> Result<(f64, f64)> {
    if voxels.is_empty() {
        return Err(Error::Validation("target patch has no voxels".into()));
    }
    let c = voxels.iter().map(|k| index.center(k)).sum::<Vector3<f64>>() / voxels.len() as f64;
    manifold.to_bev(&c)
}

fn source_is_usable(
    keys: &[VoxelKey],
    target: &BTreeSet<VoxelKey>,
    index: &VoxelIndex,
    excluded: &BTreeSet<PrimitiveId>,
) -> bool {
    let distinct: BTreeSet<VoxelKey> = keys.iter().copied().collect();
    distinct.len() == keys.len()
        && keys.iter().all(|k| {
            !target.contains(k)
                && index.is_occupied(k)
                && index.anchors_in(k).iter().all(|id| !excluded.contains(id))
        })
}

fn grid(span: f64, stride: f64) -> Vec<f64> {
    let n = (span / stride + 1e-9).floor() as i64;
    (1..=n).map(|k| k as f64 * stride).collect()
}

/// Placements on the stride grid `du in +-[stride, span_u]`,
/// `dv in {0} u +-[stride, span_v]`, keeping only those whose source voxels
/// are all occupied, free of excluded anchors and disjoint from the target.
pub fn enumerate_candidates(
    target: &Patch,
    index: &VoxelIndex,
    manifold: &GroundManifold,
    cfg: &SearchConfig,
    excluded: &BTreeSet<PrimitiveId>,
) -> Result<Vec<CandidatePlacement>> {
    cfg.validate()?;
    let stride = cfg.stride_for(index.voxel_size);
    let (ut, vt) = patch_reference(&target.voxels, index, manifold)?;
    let ft = manifold.frame_at(ut);
    let pt = manifold.from_bev(ut, vt);
    let mut dus: Vec<f64> = grid(cfg.span_u, stride).into_iter().flat_map(|d| [d, -d]).collect();
    dus.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(b.total_cmp(a)));
    let mut dvs = vec![0.0];
    dvs.extend(grid(cfg.span_v, stride).into_iter().flat_map(|d| [d, -d]));
    let half = index.voxel_size / 2.0 * (1.0 + 1e-9);
    let length = manifold.length();
    let mut out = Vec::new();
    for &du in &dus {
        for &dv in &dvs {
            let (us, vs) = (ut + du, vt + dv);
            if vs.abs() > CORRIDOR_HALF_WIDTH || us < -CORRIDOR_HALF_WIDTH || us > length + CORRIDOR_HALF_WIDTH {
                continue;
            }
            let fs = manifold.frame_at(us);
            let ps = manifold.from_bev(us, vs);
            let theta = ft.heading() - fs.heading();
            let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), theta);
            let map = RigidMap {
                theta,
                translation: (pt - rot * ps).into(),
            };
            let pairs: Vec<(VoxelKey, VoxelKey)> =
                target.voxels.iter().map(|k| (*k, index.key_of(&map.apply_inverse(&index.center(k))))).collect();
            let aligned = pairs
                .iter()
                .all(|(t, s)| (map.apply(&index.center(s)) - index.center(t)).norm() <= half);
            let keys: Vec<VoxelKey> = pairs.iter().map(|p| p.1).collect();
            if aligned && source_is_usable(&keys, &target.voxels, index, excluded) {
                out.push(CandidatePlacement {
                    pairs,
                    map,
                    delta_u: du,
                    delta_v: dv,
                });
            }
        }
    }
    Ok(out)
}

/// Every pure voxel translation of the target onto occupied, usable voxels
/// whose BEV offset is at least half a voxel along the road. No span or
/// stride pruning.
pub fn oracle_candidates(
    target: &Patch,
    index: &VoxelIndex,
    manifold: &GroundManifold,
    excluded: &BTreeSet<PrimitiveId>,
) -> Result<Vec<CandidatePlacement>> {
    let (ut, vt) = patch_reference(&target.voxels, index, manifold)?;
    let first = *target.voxels.iter().next().expect("reference checked non-empty");
    let mut out = Vec::new();
    for (key, _) in index.occupied() {
        let d = (key.0 - first.0, key.1 - first.1, key.2 - first.2);
        if d == (0, 0, 0) {
            continue;
        }
        let pairs: Vec<(VoxelKey, VoxelKey)> = target.voxels.iter().map(|k| (*k, k.offset(d))).collect();
        let keys: Vec<VoxelKey> = pairs.iter().map(|p| p.1).collect();
        if !source_is_usable(&keys, &target.voxels, index, excluded) {
            continue;
        }
        let shift = Vector3::new(d.0 as f64, d.1 as f64, d.2 as f64) * index.voxel_size;
        let centroid =
            target.voxels.iter().map(|k| index.center(k)).sum::<Vector3<f64>>() / target.voxels.len() as f64;
        let Ok((us, vs)) = manifold.to_bev(&(centroid + shift)) else {
            continue;
        };
        let (du, dv) = (us - ut, vs - vt);
        if du.abs() < index.voxel_size / 2.0 {
            continue;
        }
        out.push(CandidatePlacement {
            pairs,
            map: RigidMap::translation(-shift),
            delta_u: du,
            delta_v: dv,
        });
    }
    Ok(out)
}

/// Camera closest to `centroid` that sees at least half of `points`, with
/// the projections of the points it sees.
fn pick_frame(cameras: &[Camera], points: &[Vector3<f64>]) -> Option<(usize, Vec<(f64, f64)>)> {
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut order: Vec<usize> = (0..cameras.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (cameras[a].center() - centroid).norm();
        let db = (cameras[b].center() - centroid).norm();
        da.total_cmp(&db).then(cameras[a].frame_index.cmp(&cameras[b].frame_index))
    });
    for i in order {
        let proj = project_points(points, &cameras[i]);
        let seen: Vec<(f64, f64)> = proj.iter().filter(|p| p.visible).map(|p| (p.pixel.x, p.pixel.y)).collect();
        if !seen.is_empty() && seen.len() as f64 >= MIN_VISIBLE_FRACTION * points.len() as f64 {
            return Some((i, seen));
        }
    }
    None
}

/// Mean of the L2-normalized bilinear feature samples; zero-norm samples are
/// skipped. `None` if nothing is left.
fn aggregate(map: &Raster, pixels: &[(f64, f64)]) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; map.channels];
    let mut buf = vec![0.0; map.channels];
    let mut n = 0usize;
    for &(x, y) in pixels {
        map.sample_bilinear(x, y, &mut buf);
        let norm = buf.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            for (s, v) in sum.iter_mut().zip(&buf) {
                *s += v / norm;
            }
            n += 1;
        }
    }
    (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Positions of the target's intact anchors, in id order.
fn intact_positions(target: &Patch, scene: &Scene) -> Result<Vec<Vector3<f64>>> {
    let lookup = scene.id_lookup();
    let ids = target.intact();
    if ids.is_empty() {
        return Err(Error::AffinityUndefined("target patch has no intact anchors".into()));
    }
    ids.iter()
        .map(|id| {
            lookup
                .get(id)
                .map(|&i| scene.primitives[i].position)
                .ok_or_else(|| Error::StaleIndex(format!("intact anchor {id} is not in the scene")))
        })
        .collect()
}

/// Anchors the affinity samples for a target patch: its intact anchors, or,
/// when the whole patch is degraded, the usable anchors of the voxel ring
/// around it so the surrounding road still says what belongs there.
fn reference_positions(
    target: &Patch,
    index: &VoxelIndex,
    excluded: &BTreeSet<PrimitiveId>,
    scene: &Scene,
) -> Result<Vec<Vector3<f64>>> {
    match intact_positions(target, scene) {
        Err(Error::AffinityUndefined(_)) => {}
        other => return other,
    }
    let mut ring = BTreeSet::new();
    for k in &target.voxels {
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let n = k.offset((dx, dy, dz));
                    if !target.voxels.contains(&n) {
                        ring.insert(n);
                    }
                }
            }
        }
    }
    let lookup = scene.id_lookup();
    let positions: Vec<Vector3<f64>> = ring
        .iter()
        .flat_map(|k| index.anchors_in(k).iter())
        .filter(|id| !excluded.contains(id))
        .filter_map(|id| lookup.get(id).map(|&i| scene.primitives[i].position))
        .collect();
    if positions.is_empty() {
        return Err(Error::AffinityUndefined("target patch and its voxel ring have no intact anchors".into()));
    }
    log::info!("target patch has no intact anchors; scoring with {} ring anchors", positions.len());
    Ok(positions)
}

fn affinity_with(
    patch_id: usize,
    targets: &[Vector3<f64>],
    placement: &CandidatePlacement,
    cache: &FeatureCache,
) -> Result<AffinityRecord> {
    let cams = &cache.scene().cameras;
    let (ti, tpix) =
        pick_frame(cams, targets).ok_or_else(|| Error::AffinityUndefined("no frame sees the target".into()))?;
    let sources: Vec<Vector3<f64>> = targets.iter().map(|p| placement.map.apply_inverse(p)).collect();
    let (si, spix) =
        pick_frame(cams, &sources).ok_or_else(|| Error::AffinityUndefined("no frame sees the source".into()))?;
    let a = aggregate(cache.get(ti), &tpix)
        .ok_or_else(|| Error::AffinityUndefined("target features are all zero".into()))?;
    let b = aggregate(cache.get(si), &spix)
        .ok_or_else(|| Error::AffinityUndefined("source features are all zero".into()))?;
    let score = cosine(&a, &b).ok_or_else(|| Error::AffinityUndefined("zero aggregate feature".into()))?;
    Ok(AffinityRecord {
        patch: patch_id,
        placement: placement.clone(),
        score,
        target_frame: cams[ti].frame_index,
        source_frame: cams[si].frame_index,
    })
}

/// Cosine similarity between the target's intact anchors sampled in their
/// nearest well-covered frame and their placement-mapped source
/// counterparts sampled likewise.
pub fn patch_affinity(
    patch_id: usize,
    target: &Patch,
    placement: &CandidatePlacement,
    cache: &FeatureCache,
) -> Result<AffinityRecord> {
    let targets = intact_positions(target, cache.scene())?;
    affinity_with(patch_id, &targets, placement, cache)
}

/// Score every candidate in parallel; placements whose affinity is
/// undefined are skipped with a log line. Output follows input order.
pub fn score_candidates(
    patch_id: usize,
    target: &Patch,
    candidates: &[CandidatePlacement],
    cache: &FeatureCache,
) -> Result<Vec<AffinityRecord>> {
    let targets = intact_positions(target, cache.scene())?;
    score_positions(patch_id, &targets, candidates, cache)
}

/// [`score_candidates`] against explicit target sample positions.
fn score_positions(
    patch_id: usize,
    targets: &[Vector3<f64>],
    candidates: &[CandidatePlacement],
    cache: &FeatureCache,
) -> Result<Vec<AffinityRecord>> {
    let scored: Vec<Result<AffinityRecord>> =
        candidates.par_iter().map(|c| affinity_with(patch_id, targets, c, cache)).collect();
    let mut out = Vec::with_capacity(scored.len());
    for (c, r) in candidates.iter().zip(scored) {
        match r {
            Ok(rec) => out.push(rec),
            Err(Error::AffinityUndefined(why)) => {
                log::debug!("skipping placement du={:.2} dv={:.2}: {why}", c.delta_u, c.delta_v)
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Preference order: higher score, then smaller `|du|`, smaller `|dv|`,
/// then lexicographically smaller source voxels. `Less` = preferred.
pub fn preference(a: &AffinityRecord, b: &AffinityRecord) -> Ordering {
    if (a.score - b.score).abs() > SCORE_TIE {
        return b.score.total_cmp(&a.score);
    }
    let by_offset = |x: f64, y: f64| {
        if (x - y).abs() <= OFFSET_TIE {
            Ordering::Equal
        } else {
            x.total_cmp(&y)
        }
    };
    by_offset(a.placement.delta_u.abs(), b.placement.delta_u.abs())
        .then_with(|| by_offset(a.placement.delta_v.abs(), b.placement.delta_v.abs()))
        .then_with(|| a.placement.source_voxels().cmp(&b.placement.source_voxels()))
}

/// Best record under [`preference`], scanning in source-voxel order so the
/// result does not depend on how the records were produced.
pub fn pick_best(records: &[AffinityRecord]) -> Option<&AffinityRecord> {
    let mut order: Vec<&AffinityRecord> = records.iter().collect();
    order.sort_by_cached_key(|r| r.placement.source_voxels());
    order.into_iter().reduce(|best, r| if preference(r, best) == Ordering::Less { r } else { best })
}

/// Enumerate, score and select the best source for one target patch.
/// Returns the winner and every scored record.
pub fn select_best(
    patch_id: usize,
    target: &Patch,
    index: &VoxelIndex,
    manifold: &GroundManifold,
    cfg: &SearchConfig,
    excluded: &BTreeSet<PrimitiveId>,
    cache: &FeatureCache,
) -> Result<(AffinityRecord, Vec<AffinityRecord>)> {
    let candidates = enumerate_candidates(target, index, manifold, cfg, excluded)?;
    let positions = reference_positions(target, index, excluded, cache.scene())?;
    let scored = score_positions(patch_id, &positions, &candidates, cache)?;
    log::info!("patch {patch_id}: {} candidates, {} scoreable", candidates.len(), scored.len());
    let best = pick_best(&scored).cloned().ok_or(Error::NoCandidate)?;
    Ok((best, scored))
}

/// Reference search: scores every usable voxel translation with the same
/// affinity and preference order as [`select_best`].
pub fn exhaustive_oracle(
    patch_id: usize,
    target: &Patch,
    index: &VoxelIndex,
    manifold: &GroundManifold,
    excluded: &BTreeSet<PrimitiveId>,
    cache: &FeatureCache,
) -> Result<AffinityRecord> {
    let candidates = oracle_candidates(target, index, manifold, excluded)?;
    let positions = reference_positions(target, index, excluded, cache.scene())?;
    let scored = score_positions(patch_id, &positions, &candidates, cache)?;
    pick_best(&scored).cloned().ok_or(Error::NoCandidate)
}

/// Source anchors of a placement, grouped by the target voxel they fill.
pub fn source_anchors(placement: &CandidatePlacement, index: &VoxelIndex) -> HashMap<VoxelKey, Vec<PrimitiveId>> {
    placement.pairs.iter().map(|(t, s)| (*t, index.anchors_in(s).to_vec())).collect()
}
