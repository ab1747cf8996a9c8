//! Substitution and fusion: transplant the chosen source patch into the
//! target voxels, build reprojected background supervision with blended
//! edges, and refine the transplanted appearance with a short L1 descent.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev::{CandidatePlacement, RigidMap};
use crate::index::{Label, Patch, VoxelIndex};
use crate::raster::{Bitmap, Raster};
use crate::render::{backward, render, render_primitives, Channels, PixelRect, RenderOptions, Upstream};
use crate::scene::{mask_for, Camera, FrameMask, Primitive, PrimitiveId, Scene};
use crate::{Error, Result};

/// Rendered alpha at or above this marks where transplanted material shows.
const COVERAGE_ALPHA: f64 = 0.5;
/// Reference pixels need at least this alpha to carry background.
const REFERENCE_ALPHA: f64 = 0.5;
/// Reprojected holes up to this chessboard distance are filled.
const FILL_RADIUS: i64 = 2;
/// Largest opacity the optimizer may set.
const MAX_OPACITY: f64 = 0.999;

/// What a transplant changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransplantRecord {
    pub patch: usize,
    /// Ids of the copies, in creation order.
    pub new_ids: Vec<PrimitiveId>,
    /// Source id of each copy.
    pub source_ids: Vec<PrimitiveId>,
    /// Copies whose opacity was set to zero.
    pub zeroed_ids: Vec<PrimitiveId>,
    pub removed_ids: Vec<PrimitiveId>,
    pub map: RigidMap,
    pub target_voxels: Vec<crate::index::VoxelKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl TransplantRecord {
    /// Copies that kept their opacity.
    pub fn live_ids(&self) -> Vec<PrimitiveId> {
        let zeroed: BTreeSet<_> = self.zeroed_ids.iter().collect();
        self.new_ids.iter().filter(|id| !zeroed.contains(id)).copied().collect()
    }
}

/// Copy the placement's source anchors into the target voxels.
///
/// Anchors of the target voxels that are targets or labeled missing /
/// incomplete are removed. Every source anchor of the mapped voxels is
/// duplicated through the rigid map. A copy keeps its opacity only if it
/// lands in a target voxel and its nearest anchor there (among removed and
/// remaining ones) was removed, so copies never double up on surviving
/// intact anchors; all other copies get opacity 0.
pub fn transplant(
    scene: &Scene,
    index: &VoxelIndex,
    patch_id: usize,
    patch: &Patch,
    placement: &CandidatePlacement,
    targets: &BTreeSet<PrimitiveId>,
) -> Result<(Scene, TransplantRecord)> {
    let lookup = scene.id_lookup();
    let in_target: BTreeSet<PrimitiveId> =
        patch.voxels.iter().flat_map(|k| index.anchors_in(k).iter().copied()).collect();
    let removed: BTreeSet<PrimitiveId> = in_target
        .iter()
        .filter(|id| {
            targets.contains(id) || matches!(patch.label(**id), Some(Label::Missing) | Some(Label::Incomplete))
        })
        .copied()
        .collect();
    let position_of = |id: &PrimitiveId| -> Result<Vector3<f64>> {
        lookup
            .get(id)
            .map(|&i| scene.primitives[i].position)
            .ok_or_else(|| Error::StaleIndex(format!("anchor {id} is indexed but not in the scene")))
    };
    // (position, was removed) of everything that sat in the target voxels
    let previous: Vec<(Vector3<f64>, bool)> = in_target
        .iter()
        .map(|id| Ok((position_of(id)?, removed.contains(id))))
        .collect::<Result<_>>()?;

    let map = placement.map;
    let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), map.theta);
    let mut next = scene.next_id();
    let mut copies = Vec::new();
    let mut record = TransplantRecord {
        patch: patch_id,
        new_ids: Vec::new(),
        source_ids: Vec::new(),
        zeroed_ids: Vec::new(),
        removed_ids: removed.iter().copied().collect(),
        map,
        target_voxels: patch.voxels.iter().copied().collect(),
        config_hash: None,
    };
    for (_, src) in &placement.pairs {
        let ids = index.anchors_in(src);
        if ids.is_empty() {
            return Err(Error::StaleIndex(format!("source voxel {src:?} is empty")));
        }
        for id in ids {
            let &i = lookup
                .get(id)
                .ok_or_else(|| Error::StaleIndex(format!("source anchor {id} is not in the scene")))?;
            let p = &scene.primitives[i];
            let mut c = p.clone();
            c.id = next;
            c.position = map.apply(&p.position);
            c.rotation = (rot * UnitQuaternion::from_quaternion(p.rotation)).into_inner();
            let lands = patch.voxels.contains(&index.key_of(&c.position));
            let replaces_removed = previous
                .iter()
                .min_by(|a, b| (a.0 - c.position).norm_squared().total_cmp(&(b.0 - c.position).norm_squared()))
                .is_some_and(|(_, was_removed)| *was_removed);
            if !(lands && replaces_removed) {
                c.opacity = 0.0;
                record.zeroed_ids.push(next);
            }
            record.new_ids.push(next);
            record.source_ids.push(*id);
            copies.push(c);
            next += 1;
        }
    }
    let mut out = scene.without(&removed);
    out.primitives.extend(copies);
    log::info!(
        "transplant: removed {}, copied {} ({} zeroed)",
        record.removed_ids.len(),
        record.new_ids.len(),
        record.zeroed_ids.len()
    );
    Ok((out, record))
}

/// Pixels where the given primitives alone reach `COVERAGE_ALPHA`.
pub fn coverage(scene: &Scene, ids: &[PrimitiveId], camera: &Camera) -> Bitmap {
    let wanted: BTreeSet<PrimitiveId> = ids.iter().copied().collect();
    let prims: Vec<Primitive> = scene.primitives.iter().filter(|p| wanted.contains(&p.id)).cloned().collect();
    let out = render_primitives(&prims, scene.feature_dim, camera, &RenderOptions::new(Channels::ALPHA));
    let (w, h) = camera.dims();
    let mut b = Bitmap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            b.set(x, y, out.alpha.get(x, y, 0) >= COVERAGE_ALPHA);
        }
    }
    b
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-6 {
        r
    } else {
        v
    }
}

fn sample1(r: &Raster, x: f64, y: f64) -> f64 {
    let mut v = [0.0];
    r.sample_bilinear(x, y, &mut v);
    v[0]
}

/// Reference-view inputs for [`reproject_background`].
pub struct ReferenceView<'a> {
    pub camera: &'a Camera,
    /// Clean background image of the reference frame.
    pub image: &'a Raster,
    /// Rendered depth and alpha of the reference frame.
    pub depth: &'a Raster,
    pub alpha: &'a Raster,
    /// Occlusion mask of the reference frame, if any.
    pub mask: Option<&'a Bitmap>,
}

/// Warp the reference background into `target` over `region`.
///
/// Each region pixel's ray is marched against the reference depth surface;
/// at the first crossing the reference image is sampled bilinearly. Pixels
/// whose crossing is occluded in the reference, lands on low alpha or on a
/// depth discontinuity are invalid; holes within two pixels of a valid
/// pixel take its value. Returns the warped image and its validity mask.
pub fn reproject_background(reference: &ReferenceView, target: &Camera, region: &Bitmap) -> Result<(Raster, Bitmap)> {
    let rc = reference.camera;
    let (rw, rh) = rc.dims();
    for (what, r, c) in [("reference image", reference.image, 3), ("reference depth", reference.depth, 1), ("reference alpha", reference.alpha, 1)] {
        if r.width != rw || r.height != rh || r.channels != c {
            return Err(Error::DimensionMismatch {
                what: what.into(),
                expected: format!("{rw}x{rh}x{c}"),
                got: r.shape_string(),
            });
        }
    }
    let (w, h) = target.dims();
    if region.width != w || region.height != h {
        return Err(Error::DimensionMismatch {
            what: "region".into(),
            expected: format!("{w}x{h}"),
            got: format!("{}x{}", region.width, region.height),
        });
    }
    let origin = target.center();
    let rot = rc.rotation_matrix();
    let project = |p: &Vector3<f64>| -> Option<(f64, f64, f64)> {
        let pc = rot * p + rc.translation;
        if pc.z <= 1e-6 {
            return None;
        }
        let (x, y) = (snap(rc.fx * pc.x / pc.z + rc.cx), snap(rc.fy * pc.y / pc.z + rc.cy));
        (x >= 0.0 && y >= 0.0 && x <= (rw - 1) as f64 && y <= (rh - 1) as f64).then_some((x, y, pc.z))
    };
    // signed gap between the point and the reference surface along the ray
    let gap = |t: f64, dir: &Vector3<f64>| -> Option<(f64, f64, f64)> {
        let (x, y, z) = project(&(origin + dir * t))?;
        if sample1(reference.alpha, x, y) <= REFERENCE_ALPHA {
            return None;
        }
        Some((z - sample1(reference.depth, x, y), x, y))
    };
    let pixels: Vec<(usize, usize)> =
        (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| region.get(x, y)).collect();
    let hits: Vec<Option<[f64; 3]>> = pixels
        .par_iter()
        .map(|&(px, py)| {
            let dir = target.ray_direction(px as f64, py as f64);
            let mut t0 = 0.1;
            let mut g0 = gap(t0, &dir);
            while t0 < 300.0 {
                let t1 = t0 * 1.01;
                let g1 = gap(t1, &dir);
                if let (Some(a), Some(b)) = (g0, g1) {
                    if a.0 < 0.0 && b.0 >= 0.0 {
                        let (mut lo, mut hi) = (t0, t1);
                        let mut last = b;
                        for _ in 0..50 {
                            let mid = 0.5 * (lo + hi);
                            match gap(mid, &dir) {
                                Some(m) if m.0 < 0.0 => lo = mid,
                                Some(m) => {
                                    hi = mid;
                                    last = m;
                                }
                                None => break,
                            }
                        }
                        let (_, x, y) = last;
                        let depth = sample1(reference.depth, x, y);
                        if last.0.abs() > 0.01 * depth.max(1e-3) {
                            return None;
                        }
                        if reference.mask.is_some_and(|m| m.get(x.round() as usize, y.round() as usize)) {
                            return None;
                        }
                        let mut rgb = [0.0; 3];
                        reference.image.sample_bilinear(x, y, &mut rgb);
                        return Some(rgb);
                    }
                }
                t0 = t1;
                g0 = g1;
            }
            None
        })
        .collect();
    let mut out = Raster::new(w, h, 3);
    let mut valid = Bitmap::new(w, h);
    for (&(x, y), hit) in pixels.iter().zip(&hits) {
        if let Some(rgb) = hit {
            out.pixel_mut(x, y).copy_from_slice(rgb);
            valid.set(x, y, true);
        }
    }
    // fill small holes from the nearest valid pixel
    let before = valid.clone();
    for &(x, y) in &pixels {
        if before.get(x, y) {
            continue;
        }
        let mut best: Option<(i64, usize, usize)> = None;
        for dy in -FILL_RADIUS..=FILL_RADIUS {
            for dx in -FILL_RADIUS..=FILL_RADIUS {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if before.get_signed(nx, ny) {
                    let d = dx * dx + dy * dy;
                    if best.is_none_or(|b| d < b.0) {
                        best = Some((d, nx as usize, ny as usize));
                    }
                }
            }
        }
        if let Some((_, nx, ny)) = best {
            let v = out.pixel(nx, ny).to_vec();
            out.pixel_mut(x, y).copy_from_slice(&v);
            valid.set(x, y, true);
        }
    }
    Ok((out, valid))
}

/// Blend the warped background into the render: `pib` inside the valid
/// area, `w_alpha * pib + (1 - w_alpha) * rendered` on the band of width
/// `band_px` along its (closed) edge, `rendered` outside. Returns the blended
/// image and the band.
pub fn blend_edges(
    pib: &Raster,
    valid: &Bitmap,
    rendered: &Raster,
    band_px: u32,
    w_alpha: f64,
) -> Result<(Raster, Bitmap)> {
    if !pib.same_shape(rendered) || valid.width != pib.width || valid.height != pib.height {
        return Err(Error::DimensionMismatch {
            what: "blend inputs".into(),
            expected: rendered.shape_string(),
            got: format!("{} / mask {}x{}", pib.shape_string(), valid.width, valid.height),
        });
    }
    let closed = valid.dilate3().erode3();
    let dist = closed.inner_distance();
    let (w, h) = (pib.width, pib.height);
    let mut band = Bitmap::new(w, h);
    let mut out = rendered.clone();
    for y in 0..h {
        for x in 0..w {
            if !valid.get(x, y) {
                continue;
            }
            let on_band = dist[y * w + x] <= band_px;
            band.set(x, y, on_band);
            let (b, i) = (pib.pixel(x, y), rendered.pixel(x, y));
            let o: Vec<f64> = if on_band {
                b.iter().zip(i).map(|(b, i)| w_alpha * b + (1.0 - w_alpha) * i).collect()
            } else {
                b.to_vec()
            };
            out.pixel_mut(x, y).copy_from_slice(&o);
        }
    }
    Ok((out, band))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub iters: usize,
    pub step: f64,
    pub band_px: u32,
    pub w_alpha: f64,
    /// Step halvings tried before an iteration is rejected.
    pub max_halvings: u32,
    /// Reference frame override for background reprojection.
    pub ref_frame: Option<u32>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            iters: 50,
            step: 0.05,
            band_px: 10,
            w_alpha: 0.5,
            max_halvings: 5,
            ref_frame: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::Config(format!("fusion.step must be positive, got {}", self.step)));
        }
        if !(0.0..=1.0).contains(&self.w_alpha) {
            return Err(Error::Config(format!("fusion.w_alpha = {} is outside [0, 1]", self.w_alpha)));
        }
        Ok(())
    }
}

/// Supervision for one frame.
#[derive(Debug, Clone)]
pub struct FusionSupervision {
    pub frame_index: u32,
    /// Blended target image.
    pub target: Raster,
    /// Pixels where `target` is defined.
    pub mask: Bitmap,
    pub band: Bitmap,
}

/// Frame in which `regions` covers the most pixels while untouched by its
/// occlusion mask (earliest such frame on ties).
pub fn select_reference_frame(regions: &BTreeMap<u32, Bitmap>, masks: &[FrameMask]) -> Option<u32> {
    let mut best: Option<(usize, u32)> = None;
    for (f, r) in regions {
        let n = r.count();
        if n == 0 || mask_for(masks, *f).is_some_and(|m| !m.mask.and(r).is_empty()) {
            continue;
        }
        if best.is_none_or(|(b, _)| n > b) {
            best = Some((n, *f));
        }
    }
    best.map(|(_, f)| f)
}

/// Build blended supervision for every frame where the live transplanted
/// copies show and the view is occluded, plus the reference frame itself.
/// `images` are the captured (clean where unoccluded) frames by index.
pub fn build_supervision(
    scene: &Scene,
    record: &TransplantRecord,
    masks: &[FrameMask],
    images: &BTreeMap<u32, Raster>,
    cfg: &FusionConfig,
) -> Result<(Vec<FusionSupervision>, Option<u32>)> {
    cfg.validate()?;
    let live = record.live_ids();
    if live.is_empty() {
        return Ok((Vec::new(), None));
    }
    let regions: BTreeMap<u32, Bitmap> =
        scene.cameras.par_iter().map(|c| (c.frame_index, coverage(scene, &live, c))).collect();
    let reference = match cfg.ref_frame {
        Some(f) => Some(f),
        None => select_reference_frame(&regions, masks),
    };
    let Some(ref_frame) = reference else {
        log::warn!("no unoccluded frame shows the transplanted region; fusion has no supervision");
        return Ok((Vec::new(), None));
    };
    let ref_cam = scene
        .camera(ref_frame)
        .ok_or_else(|| Error::MissingInput(format!("reference frame {ref_frame} has no camera")))?;
    let ref_image = images
        .get(&ref_frame)
        .ok_or_else(|| Error::MissingInput(format!("no image for reference frame {ref_frame}")))?;
    let ref_render = render(scene, ref_cam, &RenderOptions::new(Channels { rgb: false, depth: true, feature: false }));
    let ref_depth = ref_render.depth.expect("depth requested");
    let view = ReferenceView {
        camera: ref_cam,
        image: ref_image,
        depth: &ref_depth,
        alpha: &ref_render.alpha,
        mask: mask_for(masks, ref_frame).map(|m| &m.mask),
    };
    let frames: Vec<(&Camera, Bitmap)> = scene
        .cameras
        .iter()
        .filter_map(|c| {
            let region = &regions[&c.frame_index];
            if c.frame_index == ref_frame {
                return Some((c, region.clone()));
            }
            let m = mask_for(masks, c.frame_index)?;
            let r = region.and(&m.mask);
            (!r.is_empty()).then_some((c, r))
        })
        .collect();
    let mut out = Vec::new();
    for (cam, region) in frames {
        let (pib, valid) = reproject_background(&view, cam, &region)?;
        if valid.is_empty() {
            log::debug!("frame {}: reprojection left nothing valid, dropped", cam.frame_index);
            continue;
        }
        let rendered = render(scene, cam, &RenderOptions::new(Channels::RGB)).rgb.expect("rgb requested");
        let (target, band) = blend_edges(&pib, &valid, &rendered, cfg.band_px, cfg.w_alpha)?;
        out.push(FusionSupervision {
            frame_index: cam.frame_index,
            target,
            mask: valid,
            band,
        });
    }
    log::info!("fusion supervision: {} frame(s), reference frame {ref_frame}", out.len());
    Ok((out, Some(ref_frame)))
}

/// Result of [`fuse`].
#[derive(Debug, Clone)]
pub struct FusionResult {
    pub scene: Scene,
    pub initial_loss: f64,
    /// Loss after each iteration (accepted iterates only move it down).
    pub trace: Vec<f64>,
    pub accepted: usize,
}

fn roi_of(mask: &Bitmap) -> Option<PixelRect> {
    mask.bounding_box().map(|(x0, y0, x1, y1)| PixelRect {
        x0,
        y0,
        x1: x1 + 1,
        y1: y1 + 1,
    })
}

/// Summed absolute RGB error over the supervision mask of one frame.
fn frame_loss(scene: &Scene, cam: &Camera, sup: &FusionSupervision) -> f64 {
    let out = render(scene, cam, &RenderOptions::new(Channels::RGB).with_roi(roi_of(&sup.mask)));
    let rgb = out.rgb.expect("rgb requested");
    let mut sum = 0.0;
    for y in 0..sup.mask.height {
        for x in 0..sup.mask.width {
            if sup.mask.get(x, y) {
                for c in 0..3 {
                    sum += (rgb.get(x, y, c) - sup.target.get(x, y, c)).abs();
                }
            }
        }
    }
    sum
}

fn supervised_values(supervision: &[FusionSupervision]) -> f64 {
    supervision.iter().map(|s| 3 * s.mask.count()).sum::<usize>().max(1) as f64
}

/// Fusion loss: mean absolute RGB error pooled over the supervision masks
/// of all frames.
pub fn fusion_loss(scene: &Scene, supervision: &[FusionSupervision]) -> Result<f64> {
    if supervision.is_empty() {
        return Ok(0.0);
    }
    let losses: Vec<Result<f64>> = supervision
        .par_iter()
        .map(|s| {
            let cam = scene
                .camera(s.frame_index)
                .ok_or_else(|| Error::MissingInput(format!("no camera for frame {}", s.frame_index)))?;
            Ok(frame_loss(scene, cam, s))
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / supervised_values(supervision))
}

/// Per-parameter gradient and preconditioning mass for the trainable set.
struct Step {
    color: Vec<[f64; 3]>,
    color_mass: Vec<f64>,
    opacity: Vec<f64>,
    opacity_mass: Vec<f64>,
}

fn gradient(scene: &Scene, supervision: &[FusionSupervision], trainable: &[usize]) -> Result<Step> {
    let scale = 1.0 / supervised_values(supervision);
    let per_frame: Vec<Result<Step>> = supervision
        .par_iter()
        .map(|s| {
            let cam = scene.camera(s.frame_index).expect("checked by fusion_loss");
            let fwd = render(scene, cam, &RenderOptions::new(Channels::RGB).with_roi(roi_of(&s.mask)).with_trace());
            let rgb = fwd.rgb.as_ref().expect("rgb requested");
            let mut up = Raster::new(rgb.width, rgb.height, 3);
            for y in 0..rgb.height {
                for x in 0..rgb.width {
                    if s.mask.get(x, y) {
                        for c in 0..3 {
                            let r = rgb.get(x, y, c) - s.target.get(x, y, c);
                            up.set(x, y, c, if r > 0.0 { scale } else if r < 0.0 { -scale } else { 0.0 });
                        }
                    }
                }
            }
            let g = backward(
                &scene.primitives,
                scene.feature_dim,
                cam,
                &fwd,
                &Upstream {
                    rgb: Some(&up),
                    ..Default::default()
                },
            )?;
            Ok(Step {
                color: trainable.iter().map(|&i| g.color[i]).collect(),
                color_mass: trainable.iter().map(|&i| g.weight_mass[i] * scale).collect(),
                opacity: trainable.iter().map(|&i| g.opacity[i]).collect(),
                opacity_mass: trainable.iter().map(|&i| g.opacity_mass[i] * 3.0 * scale).collect(),
            })
        })
        .collect();
    let m = trainable.len();
    let mut acc = Step {
        color: vec![[0.0; 3]; m],
        color_mass: vec![0.0; m],
        opacity: vec![0.0; m],
        opacity_mass: vec![0.0; m],
    };
    for f in per_frame {
        let f = f?;
        for k in 0..m {
            for c in 0..3 {
                acc.color[k][c] += f.color[k][c];
            }
            acc.color_mass[k] += f.color_mass[k];
            acc.opacity[k] += f.opacity[k];
            acc.opacity_mass[k] += f.opacity_mass[k];
        }
    }
    Ok(acc)
}

/// Damping added to every preconditioning mass: the mean mass over the
/// primitives that receive any supervision. Barely-observed primitives then
/// take proportionally small steps instead of being driven by a few pixels.
fn damping(mass: &[f64]) -> f64 {
    let seen: Vec<f64> = mass.iter().copied().filter(|&m| m > 0.0).collect();
    if seen.is_empty() {
        return 1.0;
    }
    seen.iter().sum::<f64>() / seen.len() as f64
}

fn apply_step(scene: &Scene, trainable: &[usize], g: &Step, step: f64) -> Scene {
    let (dc, dop) = (damping(&g.color_mass), damping(&g.opacity_mass));
    let mut next = scene.clone();
    for (k, &i) in trainable.iter().enumerate() {
        let p = &mut next.primitives[i];
        for c in 0..3 {
            p.color[c] = (p.color[c] - step * g.color[k][c] / (g.color_mass[k] + dc)).clamp(0.0, 1.0);
        }
        p.opacity = (p.opacity - step * g.opacity[k] / (g.opacity_mass[k] + dop)).clamp(0.0, MAX_OPACITY);
    }
    next
}

/// Refine color and opacity of the `trainable` primitives against the
/// supervision by preconditioned gradient descent with backtracking: a
/// step that raises the loss is halved up to `max_halvings` times and
/// rejected if it still does. Every other primitive is left untouched.
pub fn fuse(
    scene: &Scene,
    trainable: &[PrimitiveId],
    supervision: &[FusionSupervision],
    cfg: &FusionConfig,
) -> Result<FusionResult> {
    cfg.validate()?;
    let lookup: HashMap<PrimitiveId, usize> = scene.id_lookup();
    let mut idx: Vec<usize> = trainable.iter().filter_map(|id| lookup.get(id).copied()).collect();
    idx.sort_unstable();
    idx.dedup();
    let initial = fusion_loss(scene, supervision)?;
    if cfg.iters == 0 {
        return Ok(FusionResult {
            scene: scene.clone(),
            initial_loss: initial,
            trace: Vec::new(),
            accepted: 0,
        });
    }
    if idx.is_empty() || supervision.is_empty() {
        log::warn!("fusion has nothing to optimize ({} primitives, {} frames)", idx.len(), supervision.len());
        return Ok(FusionResult {
            scene: scene.clone(),
            initial_loss: initial,
            trace: vec![initial; cfg.iters],
            accepted: 0,
        });
    }
    let mut current = scene.clone();
    let mut loss = initial;
    let mut trace = Vec::with_capacity(cfg.iters);
    let mut accepted = 0;
    for it in 0..cfg.iters {
        let g = gradient(&current, supervision, &idx)?;
        let mut step = cfg.step;
        for _ in 0..=cfg.max_halvings {
            let candidate = apply_step(&current, &idx, &g, step);
            let l = fusion_loss(&candidate, supervision)?;
            if l <= loss {
                current = candidate;
                loss = l;
                accepted += 1;
                break;
            }
            step *= 0.5;
        }
        log::debug!("fusion iter {it}: loss {loss:.6}");
        trace.push(loss);
    }
    log::info!("fusion: loss {initial:.5} -> {loss:.5} ({accepted}/{} steps accepted)", cfg.iters);
    Ok(FusionResult {
        scene: current,
        initial_loss: initial,
        trace,
        accepted,
    })
}
