//! Appearance and feature fitting: per-primitive feature embeddings against
//! 2D feature maps, a simplified composite photometric refinement, and the
//! SSIM index it needs.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::raster::{Bitmap, Raster};
use crate::render::{backward, render, Channels, PrimitiveGradients, RenderOptions, Upstream};
use crate::scene::{mask_for, Camera, FeatureMap, FrameMask, PrimitiveId, Scene};
use crate::{Error, Result};

/// SSIM window: 11 x 11 Gaussian with sigma 1.5.
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Feature cells whose rendered coverage is below this carry no feature.
const MIN_COVERAGE: f64 = 1e-3;
/// The learning rate decays exponentially to this fraction over a run.
const FINAL_LR_FRACTION: f64 = 0.01;
const MAX_OPACITY: f64 = 0.999;

fn ssim_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    k
}

/// Separable window sum truncated at the image border (not normalized).
fn window_sum(img: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in -r..=r {
                let xx = x as i64 + d;
                if xx >= 0 && xx < w as i64 {
                    s += k[(d + r) as usize] * img[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in -r..=r {
                let yy = y as i64 + d;
                if yy >= 0 && yy < h as i64 {
                    s += k[(d + r) as usize] * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn channel(r: &Raster, c: usize) -> Vec<f64> {
    r.data.iter().skip(c).step_by(r.channels).copied().collect()
}

/// Mean SSIM over pixels and channels (restricted to `region` when given),
/// and optionally its gradient with respect to `a`. Windows are truncated at
/// the border and renormalized.
fn ssim_impl(a: &Raster, b: &Raster, region: Option<&Bitmap>, want_grad: bool) -> Result<(f64, Option<Raster>)> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch {
            what: "ssim inputs".into(),
            expected: a.shape_string(),
            got: b.shape_string(),
        });
    }
    let (w, h, ch) = (a.width, a.height, a.channels);
    if let Some(m) = region {
        if (m.width, m.height) != (w, h) {
            return Err(Error::dims("ssim region", format!("{w}x{h}"), format!("{}x{}", m.width, m.height)));
        }
    }
    let inside = |q: usize| region.is_none_or(|m| m.bits[q]);
    let n = (region.map_or(w * h, |m| m.count()) * ch) as f64;
    if n == 0.0 {
        return Ok((1.0, want_grad.then(|| Raster::new(w, h, ch))));
    }
    let k = ssim_kernel();
    let z = window_sum(&vec![1.0; w * h], w, h, &k);
    let mean = |v: &[f64]| -> Vec<f64> { window_sum(v, w, h, &k).iter().zip(&z).map(|(s, z)| s / z).collect() };
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Raster::new(w, h, ch));
    for c in 0..ch {
        let (av, bv) = (channel(a, c), channel(b, c));
        let aa: Vec<f64> = av.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = bv.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
        let (mu_a, mu_b) = (mean(&av), mean(&bv));
        let (e_aa, e_bb, e_ab) = (mean(&aa), mean(&bb), mean(&ab));
        let mut coef = [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]];
        for q in 0..w * h {
            let (ma, mb) = (mu_a[q], mu_b[q]);
            let va = e_aa[q] - ma * ma;
            let vb = e_bb[q] - mb * mb;
            let cov = e_ab[q] - ma * mb;
            let a1 = 2.0 * ma * mb + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = ma * ma + mb * mb + SSIM_C1;
            let b2 = va + vb + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            if !inside(q) {
                continue;
            }
            total += s;
            if want_grad {
                let d_mu = s * (2.0 * mb / a1 - 2.0 * ma / b1);
                let d_cov = s * 2.0 / a2;
                let d_var = -s / b2;
                // dS(q)/da(p) = w(q,p) * (alpha + a(p) * beta + b(p) * gamma)
                coef[0][q] = (d_mu - 2.0 * ma * d_var - mb * d_cov) / z[q];
                coef[1][q] = 2.0 * d_var / z[q];
                coef[2][q] = d_cov / z[q];
            }
        }
        if let Some(g) = grad.as_mut() {
            let [alpha, beta, gamma] = coef.map(|c| window_sum(&c, w, h, &k));
            for p in 0..w * h {
                g.data[p * ch + c] = (alpha[p] + av[p] * beta[p] + bv[p] * gamma[p]) / n;
            }
        }
    }
    Ok((total / n, grad))
}

/// Structural similarity index (mean over pixels and channels).
pub fn ssim(a: &Raster, b: &Raster) -> Result<f64> {
    Ok(ssim_impl(a, b, None, false)?.0)
}

/// SSIM averaged over the pixels of `region` only. The local statistics still
/// see the whole image, so an all-true region gives exactly [`ssim`].
pub fn ssim_region(a: &Raster, b: &Raster, region: &Bitmap) -> Result<f64> {
    Ok(ssim_impl(a, b, Some(region), false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_gradient(a: &Raster, b: &Raster) -> Result<(f64, Raster)> {
    let (v, g) = ssim_impl(a, b, None, true)?;
    Ok((v, g.expect("gradient requested")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_ssim: f64,
    pub lambda_depth: f64,
    pub lambda_feat: f64,
    pub iters: usize,
    /// Learning rate for color and opacity.
    pub step: f64,
    /// Learning rate for feature vectors, kept separate from appearance.
    pub feature_step: f64,
    pub prune_opacity: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_ssim: 0.2,
            lambda_depth: 0.2,
            lambda_feat: 1.0,
            iters: 200,
            step: 0.05,
            feature_step: 0.05,
            prune_opacity: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_ssim", self.lambda_ssim), ("lambda_depth", self.lambda_depth), ("lambda_feat", self.lambda_feat)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("train.{name} must be non-negative, got {v}")));
            }
        }
        if self.lambda_ssim > 1.0 {
            return Err(Error::Config(format!("train.lambda_ssim = {} exceeds 1", self.lambda_ssim)));
        }
        if !(self.step > 0.0) || !(self.feature_step > 0.0) {
            return Err(Error::Config("train step sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.prune_opacity) {
            return Err(Error::Config(format!("train.prune_opacity = {} is outside [0, 1)", self.prune_opacity)));
        }
        Ok(())
    }
}

/// Output of [`fit_embeddings`] and [`simplified_train`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub scene: Scene,
    /// Loss before each iteration's update, plus the final loss.
    pub trace: Vec<f64>,
    /// Primitives removed by opacity pruning.
    pub pruned: Vec<PrimitiveId>,
}

struct FeatureTarget<'a> {
    map: &'a Raster,
    fx: usize,
    fy: usize,
    /// Low-resolution cells free of masked pixels.
    valid: Bitmap,
}

struct Frame<'a> {
    camera: &'a Camera,
    image: Option<&'a Raster>,
    depth: Option<&'a Raster>,
    feature: Option<FeatureTarget<'a>>,
    mask: Option<&'a Bitmap>,
}

impl Frame<'_> {
    fn masked(&self, x: usize, y: usize) -> bool {
        self.mask.is_some_and(|m| m.get(x, y))
    }
}

/// Loss weights already divided by the number of supervised values.
#[derive(Debug, Clone, Copy)]
struct Coefficients {
    rgb: f64,
    ssim: f64,
    depth: f64,
    feat: f64,
    /// Whether opacity receives gradient from the feature normalization.
    feature_alpha: bool,
}

fn check_dims(what: String, cam: &Camera, w: usize, h: usize) -> Result<()> {
    let (cw, ch) = cam.dims();
    if (cw, ch) != (w, h) {
        return Err(Error::DimensionMismatch {
            what,
            expected: format!("{cw}x{ch}"),
            got: format!("{w}x{h}"),
        });
    }
    Ok(())
}

fn feature_target<'a>(scene: &Scene, cam: &Camera, fm: &'a FeatureMap, mask: Option<&Bitmap>) -> Result<FeatureTarget<'a>> {
    if fm.dim() != scene.feature_dim {
        return Err(Error::DimensionMismatch {
            what: format!("feature map of frame {}", fm.frame_index),
            expected: format!("D = {}", scene.feature_dim),
            got: format!("D = {}", fm.dim()),
        });
    }
    let (w, h) = cam.dims();
    let (mw, mh) = (fm.data.width, fm.data.height);
    if mw == 0 || mh == 0 || w % mw != 0 || h % mh != 0 {
        return Err(Error::DimensionMismatch {
            what: format!("feature map of frame {}", fm.frame_index),
            expected: format!("a divisor of {w}x{h}"),
            got: format!("{mw}x{mh}"),
        });
    }
    let (fx, fy) = (w / mw, h / mh);
    let mut valid = Bitmap::filled(mw, mh, true);
    if let Some(m) = mask {
        for y in 0..h {
            for x in 0..w {
                if m.get(x, y) {
                    valid.set(x / fx, y / fy, false);
                }
            }
        }
    }
    Ok(FeatureTarget { map: &fm.data, fx, fy, valid })
}

/// Subgradient of `|r|` taken as 0 at 0.
fn sign(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-frame summed residuals of each loss term.
#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    rgb: f64,
    ssim: f64,
    depth: f64,
    feat: f64,
}

fn frame_pass(scene: &Scene, f: &Frame, k: &Coefficients, want_grad: bool) -> Result<(Sums, Option<PrimitiveGradients>)> {
    let cam = f.camera;
    let (w, h) = cam.dims();
    let channels = Channels {
        rgb: f.image.is_some(),
        depth: f.depth.is_some(),
        feature: f.feature.is_some(),
    };
    let mut opts = RenderOptions::new(channels);
    if want_grad {
        opts = opts.with_trace();
    }
    let out = render(scene, cam, &opts);
    let mut sums = Sums::default();
    let mut up_rgb = (want_grad && f.image.is_some()).then(|| Raster::new(w, h, 3));
    let mut up_depth = (want_grad && f.depth.is_some()).then(|| Raster::new(w, h, 1));
    let mut up_feat = (want_grad && f.feature.is_some()).then(|| Raster::new(w, h, scene.feature_dim));
    let mut up_alpha = (want_grad && f.feature.is_some() && k.feature_alpha).then(|| Raster::new(w, h, 1));

    if let (Some(gt), Some(rgb)) = (f.image, out.rgb.as_ref()) {
        for y in 0..h {
            for x in 0..w {
                if f.masked(x, y) {
                    continue;
                }
                for c in 0..3 {
                    let r = rgb.get(x, y, c) - gt.get(x, y, c);
                    sums.rgb += r.abs();
                    if let Some(u) = up_rgb.as_mut() {
                        u.set(x, y, c, k.rgb * sign(r));
                    }
                }
            }
        }
        if k.ssim > 0.0 {
            // masked ground truth is replaced by the render itself
            let mut target = gt.clone();
            if let Some(m) = f.mask {
                for y in 0..h {
                    for x in 0..w {
                        if m.get(x, y) {
                            target.pixel_mut(x, y).copy_from_slice(rgb.pixel(x, y));
                        }
                    }
                }
            }
            let (s, g) = ssim_impl(rgb, &target, None, want_grad)?;
            sums.ssim = 1.0 - s;
            if let (Some(u), Some(g)) = (up_rgb.as_mut(), g) {
                for (dst, v) in u.data.iter_mut().zip(&g.data) {
                    *dst -= k.ssim * v;
                }
            }
        }
    }

    if let (Some(gt), Some(d)) = (f.depth, out.depth.as_ref()) {
        for y in 0..h {
            for x in 0..w {
                let g = gt.get(x, y, 0);
                if f.masked(x, y) || !(g > 0.0) {
                    continue;
                }
                let r = d.get(x, y, 0) - g;
                sums.depth += r.abs();
                if let Some(u) = up_depth.as_mut() {
                    if out.alpha.get(x, y, 0) > 0.0 {
                        u.set(x, y, 0, k.depth * sign(r));
                    }
                }
            }
        }
    }

    if let (Some(t), Some(feat)) = (f.feature.as_ref(), out.feature.as_ref()) {
        let dim = scene.feature_dim;
        let block = (t.fx * t.fy) as f64;
        let mut s = vec![0.0; dim];
        for cy in 0..t.map.height {
            for cx in 0..t.map.width {
                if !t.valid.get(cx, cy) {
                    continue;
                }
                s.iter_mut().for_each(|v| *v = 0.0);
                let mut a = 0.0;
                for y in cy * t.fy..(cy + 1) * t.fy {
                    for x in cx * t.fx..(cx + 1) * t.fx {
                        for (sv, fv) in s.iter_mut().zip(feat.pixel(x, y)) {
                            *sv += fv / block;
                        }
                        a += out.alpha.get(x, y, 0) / block;
                    }
                }
                let gt = t.map.pixel(cx, cy);
                if a < MIN_COVERAGE {
                    sums.feat += gt.iter().map(|v| v.abs()).sum::<f64>();
                    continue;
                }
                let mut d_alpha = 0.0;
                let mut signs = vec![0.0; dim];
                for d in 0..dim {
                    let r = s[d] / a - gt[d];
                    sums.feat += r.abs();
                    signs[d] = sign(r);
                    d_alpha -= signs[d] * s[d] / (a * a);
                }
                if let Some(u) = up_feat.as_mut() {
                    for y in cy * t.fy..(cy + 1) * t.fy {
                        for x in cx * t.fx..(cx + 1) * t.fx {
                            for (dst, sg) in u.pixel_mut(x, y).iter_mut().zip(&signs) {
                                *dst = k.feat * sg / (a * block);
                            }
                            if let Some(ua) = up_alpha.as_mut() {
                                ua.set(x, y, 0, k.feat * d_alpha / block);
                            }
                        }
                    }
                }
            }
        }
    }

    if !want_grad {
        return Ok((sums, None));
    }
    let g = backward(
        &scene.primitives,
        scene.feature_dim,
        cam,
        &out,
        &Upstream {
            rgb: up_rgb.as_ref(),
            feature: up_feat.as_ref(),
            alpha: up_alpha.as_ref(),
            depth: up_depth.as_ref(),
        },
    )?;
    Ok((sums, Some(g)))
}

struct Problem<'a> {
    frames: Vec<Frame<'a>>,
    coefficients: Coefficients,
    /// Term weights for the reported loss: (rgb, ssim, depth, feat).
    norm: Sums,
}

impl Problem<'_> {
    fn evaluate(&self, scene: &Scene, want_grad: bool) -> Result<(f64, Option<PrimitiveGradients>)> {
        let per_frame: Vec<Result<(Sums, Option<PrimitiveGradients>)>> =
            self.frames.par_iter().map(|f| frame_pass(scene, f, &self.coefficients, want_grad)).collect();
        let mut loss = 0.0;
        let mut total: Option<PrimitiveGradients> = None;
        for r in per_frame {
            let (s, g) = r?;
            loss += s.rgb * self.norm.rgb + s.ssim * self.norm.ssim + s.depth * self.norm.depth + s.feat * self.norm.feat;
            if let Some(g) = g {
                match total.as_mut() {
                    None => total = Some(g),
                    Some(t) => {
                        for (a, b) in t.color.iter_mut().zip(&g.color) {
                            for c in 0..3 {
                                a[c] += b[c];
                            }
                        }
                        if t.feature.is_empty() {
                            t.feature = g.feature;
                        } else {
                            for (a, b) in t.feature.iter_mut().zip(&g.feature) {
                                *a += b;
                            }
                        }
                        for (a, b) in t.opacity.iter_mut().zip(&g.opacity) {
                            *a += b;
                        }
                    }
                }
            }
        }
        Ok((loss, total))
    }
}

/// Per-parameter Adam moments.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-16;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Update direction for parameter `i` at 1-based iteration `t`.
    fn direction(&mut self, i: usize, g: f64, t: i32) -> f64 {
        self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
        self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
        let mh = self.m[i] / (1.0 - Self::B1.powi(t));
        let vh = self.v[i] / (1.0 - Self::B2.powi(t));
        if vh == 0.0 {
            0.0
        } else {
            mh / (vh.sqrt() + Self::EPS)
        }
    }
}

fn learning_rate(base: f64, it: usize, iters: usize) -> f64 {
    base * FINAL_LR_FRACTION.powf(it as f64 / (iters.max(2) - 1) as f64)
}

fn optimize(scene: &Scene, problem: &Problem, cfg: &TrainConfig, appearance: bool) -> Result<(Scene, Vec<f64>)> {
    let mut current = scene.clone();
    let n = current.primitives.len();
    let dim = current.feature_dim;
    let (mut adam_color, mut adam_opacity, mut adam_feat) = (Adam::new(3 * n), Adam::new(n), Adam::new(n * dim));
    let mut trace = Vec::with_capacity(cfg.iters + 1);
    for it in 0..cfg.iters {
        let (loss, g) = problem.evaluate(&current, true)?;
        trace.push(loss);
        let g = g.expect("gradient requested");
        let t = it as i32 + 1;
        let lr = learning_rate(cfg.step, it, cfg.iters);
        let lr_f = learning_rate(cfg.feature_step, it, cfg.iters);
        for (i, p) in current.primitives.iter_mut().enumerate() {
            if appearance {
                for c in 0..3 {
                    let d = adam_color.direction(3 * i + c, g.color[i][c], t);
                    p.color[c] = (p.color[c] - lr * d).clamp(0.0, 1.0);
                }
                let d = adam_opacity.direction(i, g.opacity[i], t);
                p.opacity = (p.opacity - lr * d).clamp(0.0, MAX_OPACITY);
            }
            if g.feature.is_empty() {
                continue;
            }
            for d in 0..dim {
                let dir = adam_feat.direction(i * dim + d, g.feature[i * dim + d], t);
                p.feature[d] -= lr_f * dir;
            }
        }
        log::debug!("fit iter {it}: loss {loss:.6}");
    }
    let (last, _) = problem.evaluate(&current, false)?;
    trace.push(last);
    Ok((current, trace))
}

fn feature_problem<'a>(scene: &'a Scene, maps: &'a [FeatureMap], masks: &'a [FrameMask]) -> Result<Problem<'a>> {
    let mut frames = Vec::new();
    let mut cells = 0usize;
    for fm in maps {
        let cam = scene
            .camera(fm.frame_index)
            .ok_or_else(|| Error::MissingInput(format!("no camera for feature map of frame {}", fm.frame_index)))?;
        let mask = mask_for(masks, fm.frame_index).map(|m| &m.mask);
        if let Some(m) = mask {
            check_dims(format!("mask of frame {}", fm.frame_index), cam, m.width, m.height)?;
        }
        let t = feature_target(scene, cam, fm, mask)?;
        cells += t.valid.count();
        frames.push(Frame {
            camera: cam,
            image: None,
            depth: None,
            feature: Some(t),
            mask,
        });
    }
    let k = 1.0 / (cells * scene.feature_dim).max(1) as f64;
    Ok(Problem {
        frames,
        coefficients: Coefficients {
            rgb: 0.0,
            ssim: 0.0,
            depth: 0.0,
            feat: k,
            feature_alpha: false,
        },
        norm: Sums {
            feat: k,
            ..Sums::default()
        },
    })
}

/// Masked feature loss: mean absolute difference between the area-averaged,
/// coverage-normalized rendered features and the maps over cells without
/// masked pixels, with its gradient (row-major `N x D`) with respect to
/// the primitives' feature vectors.
pub fn feature_loss(scene: &Scene, maps: &[FeatureMap], masks: &[FrameMask]) -> Result<(f64, Vec<f64>)> {
    let problem = feature_problem(scene, maps, masks)?;
    let (loss, g) = problem.evaluate(scene, true)?;
    let g = g.map(|g| g.feature).unwrap_or_else(|| vec![0.0; scene.primitives.len() * scene.feature_dim]);
    Ok((loss, g))
}

/// Fit per-primitive feature vectors to 2D feature maps. Only features
/// change; masked pixels contribute neither loss nor gradient.
pub fn fit_embeddings(scene: &Scene, maps: &[FeatureMap], masks: &[FrameMask], cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    let problem = feature_problem(scene, maps, masks)?;
    let (fitted, trace) = optimize(scene, &problem, cfg, false)?;
    log::info!(
        "feature fit: loss {:.5} -> {:.5} over {} iteration(s)",
        trace.first().unwrap_or(&0.0),
        trace.last().unwrap_or(&0.0),
        cfg.iters
    );
    Ok(FitResult {
        scene: fitted,
        trace,
        pruned: Vec::new(),
    })
}

/// Refine color, opacity and features of every primitive against the
/// composite loss `(1 - l_ssim) L1 + l_ssim (1 - SSIM) + l_depth Ldepth +
/// l_feat Lfeat`, then prune primitives below `prune_opacity`. Geometry is
/// frozen. Inputs are keyed by frame index; frames without any supervision
/// are skipped.
pub fn simplified_train(
    scene: &Scene,
    images: &BTreeMap<u32, Raster>,
    depths: Option<&BTreeMap<u32, Raster>>,
    features: &[FeatureMap],
    masks: &[FrameMask],
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    let use_depth = cfg.lambda_depth > 0.0 && depths.is_some_and(|d| !d.is_empty());
    let use_feat = cfg.lambda_feat > 0.0 && !features.is_empty();
    if images.is_empty() && !use_depth && !use_feat {
        return Err(Error::Config("simplified training has no supervision channel enabled".into()));
    }
    let mut frames = Vec::new();
    let (mut n_rgb, mut n_ssim, mut n_depth, mut n_feat) = (0usize, 0usize, 0usize, 0usize);
    for cam in &scene.cameras {
        let fi = cam.frame_index;
        let (w, h) = cam.dims();
        let mask = mask_for(masks, fi).map(|m| &m.mask);
        if let Some(m) = mask {
            check_dims(format!("mask of frame {fi}"), cam, m.width, m.height)?;
        }
        let masked = |x: usize, y: usize| mask.is_some_and(|m| m.get(x, y));
        let image = images.get(&fi);
        if let Some(img) = image {
            check_dims(format!("image of frame {fi}"), cam, img.width, img.height)?;
            if img.channels != 3 {
                return Err(Error::DimensionMismatch {
                    what: format!("image of frame {fi}"),
                    expected: "3 channels".into(),
                    got: format!("{} channels", img.channels),
                });
            }
            n_rgb += 3 * (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| !masked(x, y)).count();
            n_ssim += 1;
        }
        let depth = if use_depth { depths.and_then(|d| d.get(&fi)) } else { None };
        if let Some(d) = depth {
            check_dims(format!("depth of frame {fi}"), cam, d.width, d.height)?;
            n_depth += (0..h)
                .flat_map(|y| (0..w).map(move |x| (x, y)))
                .filter(|&(x, y)| !masked(x, y) && d.get(x, y, 0) > 0.0)
                .count();
        }
        let feature = if use_feat {
            features.iter().find(|f| f.frame_index == fi).map(|fm| feature_target(scene, cam, fm, mask)).transpose()?
        } else {
            None
        };
        if let Some(t) = feature.as_ref() {
            n_feat += t.valid.count() * scene.feature_dim;
        }
        if image.is_none() && depth.is_none() && feature.is_none() {
            continue;
        }
        frames.push(Frame {
            camera: cam,
            image,
            depth,
            feature,
            mask,
        });
    }
    if frames.is_empty() {
        return Err(Error::MissingInput("no frame has supervision".into()));
    }
    let per = |weight: f64, n: usize| if n == 0 { 0.0 } else { weight / n as f64 };
    let norm = Sums {
        rgb: per(1.0 - cfg.lambda_ssim, n_rgb),
        ssim: per(cfg.lambda_ssim, n_ssim),
        depth: per(cfg.lambda_depth, n_depth),
        feat: per(cfg.lambda_feat, n_feat),
    };
    let problem = Problem {
        frames,
        coefficients: Coefficients {
            rgb: norm.rgb,
            ssim: norm.ssim,
            depth: norm.depth,
            feat: norm.feat,
            feature_alpha: true,
        },
        norm,
    };
    if cfg.iters == 0 {
        let (loss, _) = problem.evaluate(scene, false)?;
        return Ok(FitResult {
            scene: scene.clone(),
            trace: vec![loss],
            pruned: Vec::new(),
        });
    }
    let (mut trained, trace) = optimize(scene, &problem, cfg, true)?;
    let pruned: Vec<PrimitiveId> =
        trained.primitives.iter().filter(|p| p.opacity < cfg.prune_opacity).map(|p| p.id).collect();
    trained.primitives.retain(|p| p.opacity >= cfg.prune_opacity);
    log::info!(
        "training: loss {:.5} -> {:.5}, pruned {} primitive(s)",
        trace.first().unwrap_or(&0.0),
        trace.last().unwrap_or(&0.0),
        pruned.len()
    );
    Ok(FitResult {
        scene: trained,
        trace,
        pruned,
    })
}
