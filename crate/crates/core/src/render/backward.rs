//! Analytic gradients of composited images with respect to per-primitive
//! color, feature and opacity. Geometry is treated as fixed.
//!
//! For a pixel with terms `k = 0..n` (front to back), `w_k = a_k G_k T_k` and
//! `T_k = prod_{j<k} (1 - a_j G_j)`. For any linear channel `out = sum w_k v_k`
//! with upstream gradient `g`, writing `s_k = g . v_k`:
//!
//! ```text
//! dL/dv_k = w_k g
//! dL/da_m = G_m (T_m s_m - sum_{k>m} w_k s_k / (1 - a_m G_m))
//! ```
//!
//! Depth is `N / A` with `N = sum w_k z_k` and `A = sum w_k`, which is handled
//! by pushing its gradient onto `N` and `A`.

use std::collections::HashMap;

use rayon::prelude::*;

use super::{fingerprint, project_splats, RenderOutput};
use crate::raster::Raster;
use crate::scene::{Camera, Primitive, Scene};
use crate::{Error, Result};

/// Rows per reduction chunk. Fixed so that summation order, and therefore the
/// result, does not depend on the number of worker threads.
const CHUNK_ROWS: usize = 4;

/// Upstream gradients `dL/d(image)` for each rendered channel. Any channel may
/// be omitted.
#[derive(Debug, Clone, Copy, Default)]
pub struct Upstream<'a> {
    pub rgb: Option<&'a Raster>,
    pub feature: Option<&'a Raster>,
    pub alpha: Option<&'a Raster>,
    pub depth: Option<&'a Raster>,
}

/// Per-primitive gradients indexed by storage index.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveGradients {
    pub color: Vec<[f64; 3]>,
    /// Row-major `N x D`.
    pub feature: Vec<f64>,
    pub feature_dim: usize,
    pub opacity: Vec<f64>,
    /// `sum_p w_k(p)`: total compositing weight, used for preconditioning.
    pub weight_mass: Vec<f64>,
    /// `sum_p G_k(p) T_k(p)`: sensitivity of coverage to opacity.
    pub opacity_mass: Vec<f64>,
}

impl PrimitiveGradients {
    fn zeros(n: usize, dim: usize) -> Self {
        PrimitiveGradients {
            color: vec![[0.0; 3]; n],
            feature: vec![0.0; n * dim],
            feature_dim: dim,
            opacity: vec![0.0; n],
            weight_mass: vec![0.0; n],
            opacity_mass: vec![0.0; n],
        }
    }

    pub fn feature_of(&self, i: usize) -> &[f64] {
        &self.feature[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn is_zero(&self) -> bool {
        self.color.iter().flatten().all(|v| *v == 0.0)
            && self.feature.iter().all(|v| *v == 0.0)
            && self.opacity.iter().all(|v| *v == 0.0)
    }

    /// Accumulate another gradient set (same primitive layout).
    pub fn add_assign(&mut self, other: &PrimitiveGradients) {
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
        for (a, b) in self.feature.iter_mut().zip(&other.feature) {
            *a += b;
        }
        for (a, b) in self.opacity.iter_mut().zip(&other.opacity) {
            *a += b;
        }
        for (a, b) in self.weight_mass.iter_mut().zip(&other.weight_mass) {
            *a += b;
        }
        for (a, b) in self.opacity_mass.iter_mut().zip(&other.opacity_mass) {
            *a += b;
        }
    }
}

#[derive(Clone)]
struct Partial {
    color: [f64; 3],
    feature: Vec<f64>,
    opacity: f64,
    weight_mass: f64,
    opacity_mass: f64,
}

fn check_dims(what: &str, r: &Raster, w: usize, h: usize, c: usize) -> Result<()> {
    if r.width != w || r.height != h || r.channels != c {
        return Err(Error::dims(what, format!("{w}x{h}x{c}"), r.shape_string()));
    }
    Ok(())
}

/// Backpropagate upstream image gradients through a traced forward pass.
///
/// `prims` must be exactly the slice that produced `forward`; any change since
/// then is reported as [`Error::StaleWeights`].
pub fn backward(
    prims: &[Primitive],
    feature_dim: usize,
    camera: &Camera,
    forward: &RenderOutput,
    upstream: &Upstream<'_>,
) -> Result<PrimitiveGradients> {
    let trace = forward
        .trace
        .as_ref()
        .ok_or_else(|| Error::Validation("forward pass was rendered without a trace".into()))?;
    if prims.len() != forward.ids.len() || fingerprint(prims, camera) != forward.fingerprint {
        return Err(Error::StaleWeights);
    }
    let (w, h) = (forward.width, forward.height);
    if let Some(r) = upstream.rgb {
        check_dims("rgb upstream", r, w, h, 3)?;
    }
    if let Some(r) = upstream.feature {
        check_dims("feature upstream", r, w, h, feature_dim)?;
    }
    if let Some(r) = upstream.alpha {
        check_dims("alpha upstream", r, w, h, 1)?;
    }
    if let Some(r) = upstream.depth {
        check_dims("depth upstream", r, w, h, 1)?;
    }
    let want_feature = upstream.feature.is_some();
    let dim = if want_feature { feature_dim } else { 0 };

    // splat depths by storage index, for the depth channel
    let depth_of: Vec<f64> = if upstream.depth.is_some() {
        let mut d = vec![0.0; prims.len()];
        for s in project_splats(prims, camera) {
            d[s.index as usize] = s.depth;
        }
        d
    } else {
        Vec::new()
    };

    let chunks = h.div_ceil(CHUNK_ROWS);
    let partials: Vec<(Vec<u32>, Vec<Partial>)> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut slot: HashMap<u32, usize> = HashMap::new();
            let mut order: Vec<u32> = Vec::new();
            let mut acc: Vec<Partial> = Vec::new();
            let mut s_buf: Vec<f64> = Vec::new();
            let y_end = ((ci + 1) * CHUNK_ROWS).min(h);
            for y in ci * CHUNK_ROWS..y_end {
                for x in 0..w {
                    let p = y * w + x;
                    let terms = trace.pixel(p);
                    if terms.is_empty() {
                        continue;
                    }
                    let g_rgb = upstream.rgb.map(|r| r.pixel(x, y));
                    let g_feat = upstream.feature.map(|r| r.pixel(x, y));
                    let mut g_alpha = upstream.alpha.map_or(0.0, |r| r.get(x, y, 0));
                    let mut g_dnum = 0.0;
                    if let Some(dr) = upstream.depth {
                        let a = forward.alpha.get(x, y, 0);
                        if a > 0.0 {
                            let g = dr.get(x, y, 0);
                            let num: f64 = terms.iter().map(|e| e.weight * depth_of[e.index as usize]).sum();
                            g_dnum = g / a;
                            g_alpha += -g * num / (a * a);
                        }
                    }
                    if g_rgb.is_none() && g_feat.is_none() && g_alpha == 0.0 && g_dnum == 0.0 {
                        continue;
                    }
                    s_buf.clear();
                    for e in terms {
                        let i = e.index as usize;
                        let mut s = g_alpha;
                        if let Some(g) = g_rgb {
                            let c = &prims[i].color;
                            s += g[0] * c.x + g[1] * c.y + g[2] * c.z;
                        }
                        if let Some(g) = g_feat {
                            s += g.iter().zip(&prims[i].feature).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if g_dnum != 0.0 {
                            s += g_dnum * depth_of[i];
                        }
                        s_buf.push(s);
                    }
                    let mut suffix = 0.0;
                    for k in (0..terms.len()).rev() {
                        let e = &terms[k];
                        let i = e.index as usize;
                        let a = prims[i].opacity;
                        let ag = a * e.footprint;
                        let behind = if 1.0 - ag > 1e-9 {
                            suffix / (1.0 - ag)
                        } else {
                            suffix_excluding(terms, prims, k, &s_buf)
                        };
                        let d_opacity = e.footprint * (e.transmittance * s_buf[k] - behind);
                        suffix += e.weight * s_buf[k];

                        let si = *slot.entry(e.index).or_insert_with(|| {
                            order.push(e.index);
                            acc.push(Partial {
                                color: [0.0; 3],
                                feature: vec![0.0; dim],
                                opacity: 0.0,
                                weight_mass: 0.0,
                                opacity_mass: 0.0,
                            });
                            acc.len() - 1
                        });
                        let pa = &mut acc[si];
                        if let Some(g) = g_rgb {
                            for c in 0..3 {
                                pa.color[c] += e.weight * g[c];
                            }
                        }
                        if let Some(g) = g_feat {
                            for (dst, gv) in pa.feature.iter_mut().zip(g) {
                                *dst += e.weight * gv;
                            }
                        }
                        pa.opacity += d_opacity;
                        pa.weight_mass += e.weight;
                        pa.opacity_mass += e.footprint * e.transmittance;
                    }
                }
            }
            (order, acc)
        })
        .collect();

    let mut out = PrimitiveGradients::zeros(prims.len(), dim);
    for (order, acc) in partials {
        for (idx, pa) in order.into_iter().zip(acc) {
            let i = idx as usize;
            for c in 0..3 {
                out.color[i][c] += pa.color[c];
            }
            for (dst, v) in out.feature[i * dim..(i + 1) * dim].iter_mut().zip(&pa.feature) {
                *dst += v;
            }
            out.opacity[i] += pa.opacity;
            out.weight_mass[i] += pa.weight_mass;
            out.opacity_mass[i] += pa.opacity_mass;
        }
    }
    if !want_feature {
        out.feature_dim = 0;
    }
    Ok(out)
}

/// `sum_{k>m} w_k s_k / (1 - a_m G_m)` recomputed without dividing, for the
/// rare case where the splat at `m` is fully opaque at this pixel.
fn suffix_excluding(terms: &[super::TraceEntry], prims: &[Primitive], m: usize, s: &[f64]) -> f64 {
    let mut t = terms[m].transmittance;
    let mut sum = 0.0;
    for k in m + 1..terms.len() {
        let e = &terms[k];
        let ag = prims[e.index as usize].opacity * e.footprint;
        sum += ag * t * s[k];
        t *= 1.0 - ag;
    }
    sum
}

/// Channel selector for [`render_gradients`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradChannel {
    Rgb,
    Feature,
}

/// Gradients of `L = sum_p residual(p) . out(p)` for one channel, i.e. the
/// residual is the upstream gradient of that channel.
pub fn render_gradients(
    scene: &Scene,
    camera: &Camera,
    forward: &RenderOutput,
    residual: &Raster,
    channel: GradChannel,
    also_opacity: bool,
) -> Result<PrimitiveGradients> {
    let up = match channel {
        GradChannel::Rgb => Upstream {
            rgb: Some(residual),
            ..Default::default()
        },
        GradChannel::Feature => Upstream {
            feature: Some(residual),
            ..Default::default()
        },
    };
    let mut g = backward(&scene.primitives, scene.feature_dim, camera, forward, &up)?;
    if !also_opacity {
        g.opacity.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(g)
}
