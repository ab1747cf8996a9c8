//! Procedural road scenes with ground truth: a periodic ground texture on a
//! jittered anchor grid, a camera rig driving along +X, billboard occluders
//! with masks, and a corrupted copy whose anchors under the occluder are
//! under-trained.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::fit_ground_manifold;
use crate::raster::{Bitmap, Raster};
use crate::render::{project_points, render, Channels, RenderOptions};
use crate::scene::{
    frame_file_name, save_depth_pgm16, save_feature_map, save_image, save_mask, save_scene, Camera, FeatureMap,
    FrameMask, Primitive, PrimitiveId, Scene,
};
use crate::{Error, Result};

/// Opacity of every clean anchor.
pub const CLEAN_OPACITY: f64 = 0.98;
/// Depth images are stored in millimeters.
pub const DEPTH_SCALE: f64 = 1000.0;
/// The billboard overhangs its footprint laterally by this much, so the
/// whole footprint is hidden from cameras on the center line.
pub const BILLBOARD_PAD: f64 = 0.5;
/// Cameras at least this far before an occluder's center see it.
const OCCLUSION_LEAD: f64 = 12.0;

/// A flat billboard standing on the near edge of a ground footprint,
/// overhanging it by [`BILLBOARD_PAD`] on both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    /// Footprint center, BEV meters.
    pub u: f64,
    pub v: f64,
    /// Footprint extent along and across the road, meters.
    pub extent_u: f64,
    pub extent_v: f64,
    /// Billboard height, meters.
    pub height: f64,
    /// Frames showing the billboard; `None` = every camera at least 12 m
    /// before the footprint center.
    #[serde(default)]
    pub frames: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub seed: u64,
    pub road_length: f64,
    pub road_width: f64,
    pub spacing: f64,
    pub period: f64,
    pub feature_dim: usize,
    /// `None` draws one occluder from the seed.
    pub occluders: Option<Vec<Occluder>>,
    pub camera_count: usize,
    pub camera_height: f64,
    pub hill: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
    /// Downward camera pitch, degrees.
    pub tilt_deg: f64,
    /// Ground-truth feature maps are this many times smaller than images.
    pub feature_downsample: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 0,
            road_length: 100.0,
            road_width: 8.0,
            spacing: 0.5,
            period: 10.0,
            feature_dim: 16,
            occluders: None,
            camera_count: 30,
            camera_height: 1.6,
            hill: 0.0,
            image_width: 256,
            image_height: 128,
            focal: 128.0,
            tilt_deg: 15.0,
            feature_downsample: 4,
        }
    }
}

/// Parameters of the analytic feature field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureParams {
    pub period: f64,
    pub road_width: f64,
    pub dim: usize,
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Unit feature vector at BEV `(u, v)`: the outer product of `dim / 2`
/// periodic phase bumps with two lateral bumps, plus a small color term.
pub fn synthetic_features(u: f64, v: f64, color: &Vector3<f64>, p: &FeatureParams) -> Vec<f64> {
    let n = p.dim / 2;
    let phase = (u / p.period).rem_euclid(1.0);
    let sigma = 0.5 / n as f64;
    let quarter = p.road_width / 4.0;
    let lateral = [
        (-(v + quarter).powi(2) / (2.0 * quarter * quarter)).exp(),
        (-(v - quarter).powi(2) / (2.0 * quarter * quarter)).exp(),
    ];
    let mut f = vec![0.0; p.dim];
    for k in 0..n {
        let d = circular_distance(phase, k as f64 / n as f64);
        let b = (-d * d / (2.0 * sigma * sigma)).exp();
        f[2 * k] = b * lateral[0];
        f[2 * k + 1] = b * lateral[1];
    }
    for c in 0..3.min(p.dim) {
        f[c] += 0.1 * (color[c] - 0.5);
    }
    let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
    f.iter().map(|x| x / norm).collect()
}

/// Periodic asphalt texture with dashed center markings and edge lines.
pub fn ground_color(u: f64, v: f64, period: f64, road_width: f64) -> Vector3<f64> {
    let phase = (u / period).rem_euclid(1.0);
    let a = std::f64::consts::TAU * phase;
    let mut c = Vector3::zeros();
    for ch in 0..3 {
        c[ch] = 0.38
            + 0.12 * (a + 0.9 * ch as f64).sin()
            + 0.07 * (2.0 * a + 1.7 * ch as f64).cos()
            + 0.05 * (3.0 * a - 0.4 * ch as f64).sin() * (v * 0.8).cos();
    }
    if v.abs() < 0.15 && phase * period < 3.0 {
        c = Vector3::new(0.92, 0.92, 0.88);
    }
    if v.abs() > road_width / 2.0 - 0.3 {
        c = Vector3::new(0.85, 0.75, 0.25);
    }
    c.map(|x| x.clamp(0.0, 1.0))
}

const BILLBOARD_COLOR: [f64; 3] = [0.75, 0.12, 0.1];

/// Ground-truth anchor labels and bookkeeping written next to the scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenManifest {
    pub seed: u64,
    pub spec: GenSpec,
    pub primitive_count: usize,
    pub camera_count: usize,
    pub feature_dim: usize,
    /// Anchors degraded by the corruption (expected `missing`).
    pub degraded: Vec<PrimitiveId>,
    /// Clean anchors hidden by occluders in at least half of their visible
    /// frames (expected `incomplete`).
    pub incomplete: Vec<PrimitiveId>,
    /// Longitudinal offsets at which the ground texture repeats exactly.
    pub repeat_offsets: Vec<f64>,
    /// Occluders with their resolved frame lists.
    pub occluders: Vec<Occluder>,
    pub occluded_frames: Vec<u32>,
}

/// Everything the generator produces, in memory.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub clean: Scene,
    pub corrupt: Scene,
    /// One mask per frame (empty where nothing is occluded).
    pub masks: Vec<FrameMask>,
    /// Clean renders with billboards composited in occluded frames.
    pub gt_images: Vec<Raster>,
    pub gt_depths: Vec<Raster>,
    pub gt_features: Vec<FeatureMap>,
    /// Clean renders without billboards: the inpainting reference.
    pub clean_images: Vec<Raster>,
    /// Per-frame projection of the occluder footprints on the ground.
    pub regions: Vec<Bitmap>,
    pub manifest: GenManifest,
}

impl GenSpec {
    fn ground(&self, x: f64) -> f64 {
        if self.hill == 0.0 {
            0.0
        } else {
            self.hill * 0.5 * (1.0 - (std::f64::consts::TAU * x / self.road_length).cos())
        }
    }

    fn ground_slope(&self, x: f64) -> f64 {
        if self.hill == 0.0 {
            0.0
        } else {
            self.hill * 0.5 * std::f64::consts::TAU / self.road_length * (std::f64::consts::TAU * x / self.road_length).sin()
        }
    }

    fn feature_params(&self) -> FeatureParams {
        FeatureParams {
            period: self.period,
            road_width: self.road_width,
            dim: self.feature_dim,
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if !(self.road_length > 0.0 && self.road_width > 0.0 && self.spacing > 0.0 && self.period > 0.0) {
            return bad("road length, width, spacing and period must be positive".into());
        }
        if self.spacing >= self.road_width || self.spacing >= self.road_length {
            return bad(format!("spacing {} does not fit the road", self.spacing));
        }
        if self.feature_dim < 4 || self.feature_dim % 2 != 0 {
            return bad(format!("feature_dim must be even and >= 4, got {}", self.feature_dim));
        }
        if self.camera_count == 0 || self.image_width == 0 || self.image_height == 0 || !(self.focal > 0.0) {
            return bad("need at least one camera with a positive image size and focal".into());
        }
        if self.feature_downsample == 0
            || self.image_width as usize % self.feature_downsample != 0
            || self.image_height as usize % self.feature_downsample != 0
        {
            return bad(format!("feature_downsample {} must divide the image size", self.feature_downsample));
        }
        if let Some(occ) = &self.occluders {
            for o in occ {
                let off_road = o.v.abs() + o.extent_v / 2.0 > self.road_width / 2.0
                    || o.u - o.extent_u / 2.0 < 0.0
                    || o.u + o.extent_u / 2.0 > self.road_length;
                if off_road || !(o.extent_u > 0.0 && o.extent_v > 0.0 && o.height > 0.0) {
                    return bad(format!("occluder at ({}, {}) is off the road or empty", o.u, o.v));
                }
            }
        }
        if self.period < 5.0 {
            log::warn!("texture period {} m is shorter than twice the default voxel size", self.period);
        }
        Ok(())
    }

    fn camera_x(&self, i: usize) -> f64 {
        if self.camera_count == 1 {
            0.0
        } else {
            i as f64 * (self.road_length - 10.0).max(0.0) / (self.camera_count - 1) as f64
        }
    }
}

fn in_footprint(o: &Occluder, x: f64, y: f64) -> bool {
    (x - o.u).abs() <= o.extent_u / 2.0 && (y - o.v).abs() <= o.extent_v / 2.0
}

/// Distance along `dir` from `c` to the billboard, if the ray hits it.
fn billboard_hit(o: &Occluder, ground_z: f64, c: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    let xb = o.u - o.extent_u / 2.0;
    if dir.x <= 1e-12 {
        return None;
    }
    let t = (xb - c.x) / dir.x;
    if t <= 0.0 {
        return None;
    }
    let hit = c + dir * t;
    let inside = (hit.y - o.v).abs() <= o.extent_v / 2.0 + BILLBOARD_PAD && hit.z >= ground_z && hit.z <= ground_z + o.height;
    inside.then_some(t)
}

/// Ray parameter of the first ground hit for the analytic height profile.
fn ground_hit(spec: &GenSpec, c: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    let f = |t: f64| {
        let p = c + dir * t;
        p.z - spec.ground(p.x)
    };
    let (mut t0, mut f0) = (0.0, f(0.0));
    while t0 < 400.0 {
        let t1 = t0 + 0.5;
        let f1 = f(t1);
        if f0 > 0.0 && f1 <= 0.0 {
            let (mut lo, mut hi) = (t0, t1);
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                if f(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        t0 = t1;
        f0 = f1;
    }
    None
}

/// Build clean and corrupted scenes plus all ground-truth images.
pub fn generate_road_scene(spec: &GenSpec) -> Result<SynthScene> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fp = spec.feature_params();

    // occluders first so the scene layout does not depend on their count
    let occluders: Vec<Occluder> = match &spec.occluders {
        Some(o) => o.clone(),
        None => {
            let l = spec.road_length;
            let eu = rng.gen_range(2.5..4.0);
            let ev = rng.gen_range(1.5..2.5);
            let vmax = (spec.road_width / 2.0 - ev / 2.0 - 0.5).clamp(0.0, 2.0);
            vec![Occluder {
                u: rng.gen_range(0.4 * l..0.6 * l),
                v: if vmax > 0.0 { rng.gen_range(-vmax..vmax) } else { 0.0 },
                extent_u: eu,
                extent_v: ev,
                height: 1.2,
                frames: None,
            }]
        }
    };
    let mut checked = spec.clone();
    checked.occluders = Some(occluders.clone());
    checked.check()?;

    let cameras: Vec<Camera> = (0..spec.camera_count)
        .map(|i| {
            let x = spec.camera_x(i);
            let eye = Vector3::new(x, 0.0, spec.ground(x) + spec.camera_height);
            let tilt = spec.tilt_deg.to_radians();
            let target = eye + Vector3::new(tilt.cos(), 0.0, -tilt.sin());
            let mut cam = Camera::look_at(i as u32, spec.image_width, spec.image_height, spec.focal, eye, target);
            let q = cam.rotation;
            cam.rotation = Quaternion::new(round32(q.w), round32(q.i), round32(q.j), round32(q.k));
            cam.rotation /= cam.rotation.norm();
            cam
        })
        .collect();
    let occluders: Vec<Occluder> = occluders
        .into_iter()
        .map(|mut o| {
            if o.frames.is_none() {
                o.frames = Some(
                    cameras
                        .iter()
                        .filter(|c| c.center().x <= o.u - OCCLUSION_LEAD)
                        .map(|c| c.frame_index)
                        .collect(),
                );
            }
            o
        })
        .collect();

    // jittered anchor grid
    let mut clean = Scene::new(spec.feature_dim);
    let nx = (spec.road_length / spec.spacing).floor() as usize;
    let ny = (spec.road_width / spec.spacing).floor() as usize;
    let jitter = 0.2 * spec.spacing;
    let sigma = 0.6 * spec.spacing;
    for i in 0..nx {
        for j in 0..ny {
            let x = (i as f64 + 0.5) * spec.spacing + rng.gen_range(-jitter..jitter);
            let y = -spec.road_width / 2.0 + (j as f64 + 0.5) * spec.spacing + rng.gen_range(-jitter..jitter);
            let z = spec.ground(x);
            let pitch = -spec.ground_slope(x).atan();
            let rot = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), pitch);
            let color = ground_color(x, y, spec.period, spec.road_width).map(round32);
            let feature = synthetic_features(x, y, &color, &fp).into_iter().map(round32).collect();
            clean.primitives.push(Primitive {
                id: clean.primitives.len() as PrimitiveId,
                position: Vector3::new(round32(x), round32(y), round32(z)),
                scale: Vector3::new(round32(sigma), round32(sigma), round32(0.03)),
                rotation: { let q = rot.quaternion(); Quaternion::new(round32(q.w), round32(q.i), round32(q.j), round32(q.k)) },
                opacity: round32(CLEAN_OPACITY),
                color,
                feature,
            });
        }
    }
    clean.cameras = cameras;
    clean.trajectory = (0..=spec.road_length.floor() as usize)
        .map(|i| {
            let x = i as f64;
            Vector3::new(x, 0.0, round32(spec.ground(x) + spec.camera_height))
        })
        .collect();
    let mut manifold = fit_ground_manifold(&clean)?;
    for s in &mut manifold.samples {
        s.s = round32(s.s);
    }
    clean.manifold = Some(manifold);

    // corruption of anchors under any occluder footprint
    let mut corrupt = clean.clone();
    let mut degraded = Vec::new();
    for p in &mut corrupt.primitives {
        if occluders.iter().any(|o| in_footprint(o, p.position.x, p.position.y)) {
            p.opacity = round32(rng.gen_range(0.2..0.7));
            p.color = Vector3::new(rng.gen(), rng.gen(), rng.gen()).map(round32);
            let f: Vec<f64> = (0..spec.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = f.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            p.feature = f.into_iter().map(|x| round32(x / n)).collect();
            degraded.push(p.id);
        }
    }

    let bill_feature: Vec<f64> = {
        let mut f = vec![0.0; spec.feature_dim];
        f[spec.feature_dim - 1] = 1.0;
        f
    };
    let (w, h) = (spec.image_width as usize, spec.image_height as usize);
    let mut out = SynthScene {
        clean: clean.clone(),
        corrupt,
        masks: Vec::new(),
        gt_images: Vec::new(),
        gt_depths: Vec::new(),
        gt_features: Vec::new(),
        clean_images: Vec::new(),
        regions: Vec::new(),
        manifest: GenManifest {
            seed: spec.seed,
            spec: checked.clone(),
            primitive_count: clean.primitives.len(),
            camera_count: clean.cameras.len(),
            feature_dim: spec.feature_dim,
            degraded: degraded.clone(),
            incomplete: Vec::new(),
            repeat_offsets: Vec::new(),
            occluders: occluders.clone(),
            occluded_frames: Vec::new(),
        },
    };
    for cam in &clean.cameras {
        let r = render(&clean, cam, &RenderOptions::new(Channels::ALL));
        let clean_rgb = r.rgb.expect("rgb requested");
        let mut rgb = clean_rgb.clone();
        let mut depth = r.depth.expect("depth requested");
        let mut feat = r.feature.expect("feature requested");
        let mut mask = Bitmap::new(w, h);
        let mut region = Bitmap::new(w, h);
        let c = cam.center();
        let rot = cam.rotation_matrix();
        for y in 0..h {
            for x in 0..w {
                let dir = cam.ray_direction(x as f64, y as f64);
                let t_ground = ground_hit(spec, &c, &dir);
                if let Some(t) = t_ground {
                    let g = c + dir * t;
                    if occluders.iter().any(|o| in_footprint(o, g.x, g.y)) {
                        region.set(x, y, true);
                    }
                }
                // nearest billboard not hidden behind a rise of the ground
                let nearest = occluders
                    .iter()
                    .filter(|o| o.frames.as_ref().is_some_and(|f| f.contains(&cam.frame_index)))
                    .filter_map(|o| billboard_hit(o, spec.ground(o.u - o.extent_u / 2.0), &c, &dir).map(|t| (t, o)))
                    .filter(|(t, _)| t_ground.is_none_or(|tg| tg >= t - 1e-9))
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                if let Some((t, o)) = nearest {
                    mask.set(x, y, true);
                    let hit = c + dir * t;
                    let stripe = if ((hit.y - o.v) * 4.0).rem_euclid(1.0) < 0.5 { 1.0 } else { 0.8 };
                    for ch in 0..3 {
                        rgb.set(x, y, ch, BILLBOARD_COLOR[ch] * stripe);
                    }
                    depth.set(x, y, 0, (rot * (dir * t)).z);
                    feat.pixel_mut(x, y).copy_from_slice(&bill_feature);
                }
            }
        }
        out.masks.push(FrameMask {
            frame_index: cam.frame_index,
            mask,
        });
        out.gt_images.push(rgb);
        out.gt_depths.push(depth);
        out.gt_features.push(FeatureMap {
            frame_index: cam.frame_index,
            data: feat.downsample(spec.feature_downsample, spec.feature_downsample),
        });
        out.clean_images.push(clean_rgb);
        out.regions.push(region);
    }

    // geometric ground truth for the incomplete class
    let degraded_set: BTreeSet<PrimitiveId> = degraded.iter().copied().collect();
    let positions: Vec<Vector3<f64>> = clean.primitives.iter().map(|p| p.position).collect();
    let mut visible = vec![0u32; positions.len()];
    let mut hidden = vec![0u32; positions.len()];
    for cam in &clean.cameras {
        let c = cam.center();
        for (i, pr) in project_points(&positions, cam).iter().enumerate() {
            if !pr.visible {
                continue;
            }
            visible[i] += 1;
            let seg = positions[i] - c;
            let dist = seg.norm();
            let dir = seg / dist;
            let blocked = occluders.iter().any(|o| {
                o.frames.as_ref().is_some_and(|f| f.contains(&cam.frame_index))
                    && billboard_hit(o, spec.ground(o.u - o.extent_u / 2.0), &c, &dir).is_some_and(|t| t < dist)
            });
            hidden[i] += blocked as u32;
        }
    }
    out.manifest.incomplete = clean
        .primitives
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            !degraded_set.contains(&p.id) && (visible[*i] == 0 || hidden[*i] as f64 >= 0.5 * visible[*i] as f64)
        })
        .map(|(_, p)| p.id)
        .collect();
    let k_max = (spec.road_length / spec.period).floor() as i64;
    out.manifest.repeat_offsets = (-k_max..=k_max).filter(|k| *k != 0).map(|k| k as f64 * spec.period).collect();
    out.manifest.occluded_frames = out.masks.iter().filter(|m| !m.mask.is_empty()).map(|m| m.frame_index).collect();
    Ok(out)
}

/// Write a generated scene in the on-disk layout used by the CLI.
pub fn write_synth(s: &SynthScene, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["masks", "gt", "clean", "regions", "features", "depth"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    save_scene(&s.clean, dir.join("scene_clean.gsp"))?;
    save_scene(&s.corrupt, dir.join("scene_corrupt.gsp"))?;
    for (k, m) in s.masks.iter().enumerate() {
        let f = m.frame_index;
        save_mask(&m.mask, dir.join("masks").join(frame_file_name(f, "pgm")))?;
        save_image(&s.gt_images[k], dir.join("gt").join(frame_file_name(f, "ppm")))?;
        save_image(&s.clean_images[k], dir.join("clean").join(frame_file_name(f, "ppm")))?;
        save_mask(&s.regions[k], dir.join("regions").join(frame_file_name(f, "pgm")))?;
        save_feature_map(&s.gt_features[k].data, dir.join("features").join(frame_file_name(f, "fmap")))?;
        save_depth_pgm16(&s.gt_depths[k], DEPTH_SCALE, dir.join("depth").join(frame_file_name(f, "pgm")))?;
    }
    let json = serde_json::to_vec_pretty(&s.manifest).expect("manifest serializes");
    let p = dir.join("manifest.json");
    fs::write(&p, json).map_err(|e| Error::io(&p, e))
}
