//! Target location: back-project semantic masks onto anchors, classify
//! anchors by how often they fall inside masks, and find missing areas in
//! the rendered alpha after removal.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev::GroundManifold;
use crate::index::{connected_components, extract_patch, Label, Patch, VoxelIndex, VoxelKey};
use crate::raster::Bitmap;
use crate::render::{project_points, render, Channels, RenderOptions};
use crate::scene::{mask_for, Camera, FrameMask, PrimitiveId, Scene};
use crate::{Error, Result};

/// Farthest ray distance considered when dropping masked pixels to the ground.
const MAX_RAY_DISTANCE: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocateConfig {
    /// Anchors at or above this opacity are never targets.
    pub opacity_thresh: f64,
    /// Recurrence rate at or above which an anchor is incomplete.
    pub cmp: f64,
    /// Rendered alpha below this counts as a hole.
    pub alpha_missing_thresh: f64,
    /// Restrict mask frames to `selected +- window` (frame index units).
    pub window: Option<u32>,
    /// Override the selected frame (default: most mask pixels).
    pub ref_frame: Option<u32>,
}

impl Default for LocateConfig {
    fn default() -> Self {
        LocateConfig {
            opacity_thresh: 0.9,
            cmp: 0.5,
            alpha_missing_thresh: 0.1,
            window: None,
            ref_frame: None,
        }
    }
}

impl LocateConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("opacity_thresh", self.opacity_thresh),
            ("cmp", self.cmp),
            ("alpha_missing_thresh", self.alpha_missing_thresh),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("locate.{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Per-anchor mask statistics, by primitive storage index.
#[derive(Debug, Clone, PartialEq)]
pub struct Recurrence {
    /// Frames in which the anchor projects inside the image.
    pub visible: Vec<u32>,
    /// Of those, frames in which it lands on a masked pixel.
    pub in_mask: Vec<u32>,
}

impl Recurrence {
    /// `in_mask / visible`, or `None` for anchors never visible.
    pub fn rate(&self, i: usize) -> Option<f64> {
        (self.visible[i] > 0).then(|| self.in_mask[i] as f64 / self.visible[i] as f64)
    }
}

/// Anchor labels plus their recurrence rates (`None` = never visible).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Classification {
    pub labels: BTreeMap<PrimitiveId, Label>,
    pub rates: BTreeMap<PrimitiveId, Option<f64>>,
}

fn check_masks(scene: &Scene, masks: &[FrameMask]) -> Result<()> {
    for m in masks {
        let cam = scene
            .camera(m.frame_index)
            .ok_or_else(|| Error::MissingInput(format!("mask for frame {} has no camera", m.frame_index)))?;
        m.check_against(cam)?;
    }
    Ok(())
}

/// The frame used for missing-area extraction: the override if given, else
/// the frame with the most mask pixels (lowest index on ties).
pub fn select_frame(masks: &[FrameMask], cfg: &LocateConfig) -> Result<u32> {
    if let Some(f) = cfg.ref_frame {
        return mask_for(masks, f)
            .map(|m| m.frame_index)
            .ok_or_else(|| Error::MissingInput(format!("no mask for selected frame {f}")));
    }
    masks
        .iter()
        .map(|m| (m.mask.count(), std::cmp::Reverse(m.frame_index)))
        .max()
        .map(|(_, r)| r.0)
        .ok_or_else(|| Error::MissingInput("no masks given".into()))
}

fn windowed<'a>(masks: &'a [FrameMask], cfg: &LocateConfig, selected: u32) -> Vec<&'a FrameMask> {
    masks
        .iter()
        .filter(|m| cfg.window.is_none_or(|w| m.frame_index.abs_diff(selected) <= w))
        .collect()
}

/// Count, per anchor, visible frames and visible frames inside the mask.
/// The mask is tested at the rounded projected pixel.
pub fn recurrence(scene: &Scene, masks: &[&FrameMask]) -> Recurrence {
    let positions: Vec<_> = scene.primitives.iter().map(|p| p.position).collect();
    let n = positions.len();
    let per_frame: Vec<(Vec<bool>, Vec<bool>)> = masks
        .par_iter()
        .filter_map(|m| {
            let cam = scene.camera(m.frame_index)?;
            let proj = project_points(&positions, cam);
            let vis: Vec<bool> = proj.iter().map(|p| p.visible).collect();
            let inside: Vec<bool> = proj
                .iter()
                .map(|p| p.visible && m.mask.get(p.pixel.x.round() as usize, p.pixel.y.round() as usize))
                .collect();
            Some((vis, inside))
        })
        .collect();
    let mut rec = Recurrence {
        visible: vec![0; n],
        in_mask: vec![0; n],
    };
    for (vis, inside) in per_frame {
        for i in 0..n {
            rec.visible[i] += vis[i] as u32;
            rec.in_mask[i] += inside[i] as u32;
        }
    }
    rec
}

/// Anchors that land inside a mask in at least one visible frame and have
/// opacity below the threshold.
pub fn identify_targets(scene: &Scene, masks: &[FrameMask], cfg: &LocateConfig) -> Result<BTreeSet<PrimitiveId>> {
    cfg.validate()?;
    check_masks(scene, masks)?;
    if masks.is_empty() {
        return Ok(BTreeSet::new());
    }
    let selected = select_frame(masks, cfg)?;
    let rec = recurrence(scene, &windowed(masks, cfg, selected));
    Ok(scene
        .primitives
        .iter()
        .enumerate()
        .filter(|(i, p)| rec.in_mask[*i] > 0 && p.opacity < cfg.opacity_thresh)
        .map(|(_, p)| p.id)
        .collect())
}

fn label_for(missing: bool, rate: Option<f64>, cmp: f64) -> Label {
    if missing {
        Label::Missing
    } else {
        match rate {
            Some(r) if r < cmp => Label::Intact,
            _ => Label::Incomplete,
        }
    }
}

/// Label every anchor of `patch`: members of `missing` are missing; others
/// are incomplete when their recurrence rate reaches `cfg.cmp` (or they are
/// never visible) and intact otherwise.
pub fn classify_anchors(
    scene: &Scene,
    patch: &Patch,
    masks: &[FrameMask],
    cfg: &LocateConfig,
    missing: &BTreeSet<PrimitiveId>,
) -> Result<Classification> {
    cfg.validate()?;
    check_masks(scene, masks)?;
    let members: BTreeSet<PrimitiveId> = patch.anchor_ids.iter().copied().collect();
    let sub = Scene {
        primitives: scene.primitives.iter().filter(|p| members.contains(&p.id)).cloned().collect(),
        ..scene.clone()
    };
    let frames = match select_frame(masks, cfg) {
        Ok(sel) => windowed(masks, cfg, sel),
        Err(_) => Vec::new(),
    };
    let rec = recurrence(&sub, &frames);
    let mut out = Classification::default();
    for (i, p) in sub.primitives.iter().enumerate() {
        let rate = rec.rate(i);
        out.labels.insert(p.id, label_for(missing.contains(&p.id), rate, cfg.cmp));
        out.rates.insert(p.id, rate);
    }
    Ok(out)
}

/// Holes in the rendered alpha inside the frame's mask, and the voxels whose
/// ground surface those holes look at.
pub fn missing_regions(
    scene_after_removal: &Scene,
    camera: &Camera,
    masks: &[FrameMask],
    index: &VoxelIndex,
    manifold: &GroundManifold,
    cfg: &LocateConfig,
) -> Result<(Bitmap, BTreeSet<VoxelKey>)> {
    let mask = mask_for(masks, camera.frame_index)
        .ok_or_else(|| Error::MissingInput(format!("no mask for frame {}", camera.frame_index)))?;
    mask.check_against(camera)?;
    let out = render(scene_after_removal, camera, &RenderOptions::new(Channels::ALPHA));
    let (w, h) = camera.dims();
    let mut holes = Bitmap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if mask.mask.get(x, y) && out.alpha.get(x, y, 0) < cfg.alpha_missing_thresh {
                holes.set(x, y, true);
            }
        }
    }
    let origin = camera.center();
    let pixels: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| holes.get(x, y)).collect();
    let hits: Vec<VoxelKey> = pixels
        .par_iter()
        .filter_map(|&(x, y)| {
            let dir = camera.ray_direction(x as f64, y as f64);
            manifold.intersect_ray(&origin, &dir, MAX_RAY_DISTANCE).map(|p| index.key_of(&p))
        })
        .collect();
    // the ground point may sit a hair below the anchors' cell layer
    let mut seeds = BTreeSet::new();
    for key in hits {
        for dk in -1..=1 {
            let k = key.offset((0, 0, dk));
            if index.is_occupied(&k) {
                seeds.insert(k);
            }
        }
    }
    Ok((holes, seeds))
}

/// Everything the later stages need from location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocateResult {
    pub voxel_size: f64,
    pub origin: [f64; 3],
    pub selected_frame: u32,
    /// Low-opacity anchors seen inside masks.
    pub targets: BTreeSet<PrimitiveId>,
    /// Anchors labeled missing: the removed targets.
    pub missing: BTreeSet<PrimitiveId>,
    /// Anchors that may never serve as source material: targets plus every
    /// anchor whose scene-wide label is not intact.
    pub excluded: BTreeSet<PrimitiveId>,
    /// Seed voxels connected to at least one target voxel.
    pub seed_voxels: BTreeSet<VoxelKey>,
    pub missing_pixels: usize,
    /// One patch per connected group of target voxels, with labels.
    pub patches: Vec<Patch>,
    pub rates: BTreeMap<PrimitiveId, Option<f64>>,
}

/// Run the full location stage on an indexed scene.
pub fn locate(
    scene: &Scene,
    masks: &[FrameMask],
    cfg: &LocateConfig,
    index: &VoxelIndex,
    manifold: &GroundManifold,
) -> Result<LocateResult> {
    cfg.validate()?;
    check_masks(scene, masks)?;
    let targets = identify_targets(scene, masks, cfg)?;
    let selected = select_frame(masks, cfg)?;
    let camera = scene.camera(selected).expect("checked above");
    let removed = scene.without(&targets);
    let (holes, seed_voxels) = missing_regions(&removed, camera, masks, index, manifold, cfg)?;
    // every removed target leaves absent geometry; seed voxels only widen
    // the patch to holes that contained no target
    let missing = targets.clone();

    let rec = recurrence(scene, &windowed(masks, cfg, selected));
    let mut excluded = targets.clone();
    for (i, p) in scene.primitives.iter().enumerate() {
        if label_for(missing.contains(&p.id), rec.rate(i), cfg.cmp) != Label::Intact {
            excluded.insert(p.id);
        }
    }

    // holes are attributed to removed targets: seed groups that touch no
    // target voxel (e.g. rays running off the road edge) are dropped
    let anchor_voxels: BTreeSet<VoxelKey> = targets.iter().filter_map(|id| index.voxel_of_anchor(*id)).collect();
    let mut all_voxels = anchor_voxels.clone();
    all_voxels.extend(seed_voxels.iter().copied());
    let lookup = scene.id_lookup();
    let mut patches = Vec::new();
    let mut rates = BTreeMap::new();
    let components: Vec<BTreeSet<VoxelKey>> = connected_components(&all_voxels)
        .into_iter()
        .filter(|c| c.iter().any(|k| anchor_voxels.contains(k)))
        .collect();
    let seed_voxels: BTreeSet<VoxelKey> =
        seed_voxels.into_iter().filter(|k| components.iter().any(|c| c.contains(k))).collect();
    for comp in components {
        let mut patch = extract_patch(index, &comp);
        let mut labels = BTreeMap::new();
        for id in &patch.anchor_ids {
            let i = lookup[id];
            let rate = rec.rate(i);
            labels.insert(*id, label_for(missing.contains(id), rate, cfg.cmp));
            rates.insert(*id, rate);
        }
        patch.labels = Some(labels);
        patches.push(patch);
    }
    log::info!(
        "located {} targets ({} missing) in {} patch(es); selected frame {selected}",
        targets.len(),
        missing.len(),
        patches.len()
    );
    Ok(LocateResult {
        voxel_size: index.voxel_size,
        origin: [index.origin.x, index.origin.y, index.origin.z],
        selected_frame: selected,
        targets,
        missing,
        excluded,
        seed_voxels,
        missing_pixels: holes.count(),
        patches,
        rates,
    })
}
