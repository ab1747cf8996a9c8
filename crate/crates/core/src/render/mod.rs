//! CPU Gaussian splatting: point projection, tiled front-to-back alpha
//! compositing of RGB / alpha / depth / feature channels, and an analytic
//! backward pass for appearance parameters.

mod backward;

use std::hash::{Hash, Hasher};

use nalgebra::{Matrix2x3, Vector2, Vector3};
use rayon::prelude::*;

pub use backward::{backward, render_gradients, GradChannel, PrimitiveGradients, Upstream};

use crate::raster::Raster;
use crate::scene::{Camera, Primitive, PrimitiveId, Scene};

/// Points closer than this to the camera plane are invisible.
pub const NEAR_PLANE: f64 = 0.05;
/// Added to the diagonal of every projected covariance, in px^2.
pub const COV_REGULARIZATION: f64 = 0.05;
/// Footprints are cut at this Mahalanobis radius.
pub const CUTOFF_SIGMA: f64 = 3.0;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
const TILE: usize = 16;

/// Result of projecting one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub visible: bool,
}

/// Project world points with the pinhole model. Pixel centers sit at integer
/// coordinates; a point is visible when it lies in front of the near plane and
/// its rounded pixel falls inside the image.
pub fn project_points(positions: &[Vector3<f64>], camera: &Camera) -> Vec<Projection> {
    let r = camera.rotation_matrix();
    positions
        .iter()
        .map(|p| {
            let pc = r * p + camera.translation;
            let depth = pc.z;
            if depth <= NEAR_PLANE {
                return Projection {
                    pixel: Vector2::new(f64::NAN, f64::NAN),
                    depth,
                    visible: false,
                };
            }
            let px = Vector2::new(
                camera.fx * pc.x / depth + camera.cx,
                camera.fy * pc.y / depth + camera.cy,
            );
            let (rx, ry) = (px.x.round(), px.y.round());
            let visible = rx >= 0.0 && ry >= 0.0 && rx < camera.width as f64 && ry < camera.height as f64;
            Projection {
                pixel: px,
                depth,
                visible,
            }
        })
        .collect()
}

/// Screen-space footprint of one primitive.
#[derive(Debug, Clone, Copy)]
pub struct Splat2D {
    /// Storage index of the primitive in the rendered slice.
    pub index: u32,
    pub primitive_id: PrimitiveId,
    pub mean2d: Vector2<f64>,
    /// Symmetric covariance `(xx, xy, yy)` in px^2, regularized.
    pub cov2d: [f64; 3],
    conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    bbox: [i64; 4],
}

impl Splat2D {
    /// Footprint value at a pixel center, zero beyond the cutoff ellipse.
    #[inline]
    pub fn footprint(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mean2d.x;
        let dy = y - self.mean2d.y;
        let m = self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy;
        if m > CUTOFF_SIGMA * CUTOFF_SIGMA {
            0.0
        } else {
            (-0.5 * m).exp().min(1.0)
        }
    }
}

/// Splats whose mean lies this many half-fields-of-view off axis are culled,
/// so anchors just in front of the image plane cannot blanket the image.
pub const FRUSTUM_GUARD: f64 = 1.3;

/// Largest `|x / z|` and `|y / z|` of a splat mean that survives culling.
pub fn frustum_limits(camera: &Camera) -> (f64, f64) {
    let half_w = camera.cx.max(camera.width as f64 - camera.cx);
    let half_h = camera.cy.max(camera.height as f64 - camera.cy);
    (FRUSTUM_GUARD * half_w / camera.fx, FRUSTUM_GUARD * half_h / camera.fy)
}

/// Project every primitive to a 2D splat, sorted front to back (ties by id).
pub fn project_splats(prims: &[Primitive], camera: &Camera) -> Vec<Splat2D> {
    let w = camera.rotation_matrix();
    let (width, height) = (camera.width as i64, camera.height as i64);
    let (lim_x, lim_y) = frustum_limits(camera);
    let mut splats: Vec<Splat2D> = prims
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let pc = w * p.position + camera.translation;
            let z = pc.z;
            if z <= NEAR_PLANE || (pc.x / z).abs() > lim_x || (pc.y / z).abs() > lim_y {
                return None;
            }
            let j = Matrix2x3::new(
                camera.fx / z,
                0.0,
                -camera.fx * pc.x / (z * z),
                0.0,
                camera.fy / z,
                -camera.fy * pc.y / (z * z),
            );
            let cov_cam = w * p.covariance() * w.transpose();
            let c = j * cov_cam * j.transpose();
            let (a, b, d) = (c[(0, 0)] + COV_REGULARIZATION, c[(0, 1)], c[(1, 1)] + COV_REGULARIZATION);
            let det = a * d - b * b;
            if !(det > 0.0) || !det.is_finite() {
                return None;
            }
            let mean = Vector2::new(camera.fx * pc.x / z + camera.cx, camera.fy * pc.y / z + camera.cy);
            let half_tr = 0.5 * (a + d);
            let lambda_max = half_tr + (half_tr * half_tr - det).max(0.0).sqrt();
            let radius = CUTOFF_SIGMA * lambda_max.sqrt();
            let bbox = [
                ((mean.x - radius).floor() as i64).max(0),
                ((mean.y - radius).floor() as i64).max(0),
                ((mean.x + radius).ceil() as i64).min(width - 1),
                ((mean.y + radius).ceil() as i64).min(height - 1),
            ];
            if bbox[0] > bbox[2] || bbox[1] > bbox[3] {
                return None;
            }
            Some(Splat2D {
                index: i as u32,
                primitive_id: p.id,
                mean2d: mean,
                cov2d: [a, b, d],
                conic: [d / det, -b / det, a / det],
                depth: z,
                opacity: p.opacity,
                bbox,
            })
        })
        .collect();
    splats.sort_by(|s, t| s.depth.total_cmp(&t.depth).then(s.primitive_id.cmp(&t.primitive_id)));
    splats
}

/// Which images to produce. Alpha is always produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channels {
    pub rgb: bool,
    pub depth: bool,
    pub feature: bool,
}

impl Channels {
    pub const RGB: Channels = Channels {
        rgb: true,
        depth: false,
        feature: false,
    };
    pub const ALL: Channels = Channels {
        rgb: true,
        depth: true,
        feature: true,
    };
    pub const FEATURE: Channels = Channels {
        rgb: false,
        depth: false,
        feature: true,
    };
    pub const ALPHA: Channels = Channels {
        rgb: false,
        depth: false,
        feature: false,
    };
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn full(width: usize, height: usize) -> Self {
        PixelRect {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub channels: Channels,
    /// Keep per-pixel compositing weights for a later backward pass.
    pub keep_trace: bool,
    /// Only shade pixels inside this rectangle; others stay zero.
    pub roi: Option<PixelRect>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            channels: Channels::ALL,
            keep_trace: false,
            roi: None,
        }
    }
}

impl RenderOptions {
    pub fn new(channels: Channels) -> Self {
        RenderOptions {
            channels,
            ..Default::default()
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.keep_trace = true;
        self
    }

    pub fn with_roi(mut self, roi: Option<PixelRect>) -> Self {
        self.roi = roi;
        self
    }
}

/// One compositing term at a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    /// Storage index of the primitive.
    pub index: u32,
    /// Compositing weight `w_k = a_k G_k T_k`.
    pub weight: f64,
    /// Footprint value `G_k`.
    pub footprint: f64,
    /// Transmittance in front of this splat.
    pub transmittance: f64,
}

/// Per-pixel ordered compositing terms in CSR layout.
#[derive(Debug, Clone, Default)]
pub struct CompositeTrace {
    pub offsets: Vec<u32>,
    pub entries: Vec<TraceEntry>,
}

impl CompositeTrace {
    pub fn pixel(&self, p: usize) -> &[TraceEntry] {
        &self.entries[self.offsets[p] as usize..self.offsets[p + 1] as usize]
    }
}

/// Images produced by [`render`].
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub rgb: Option<Raster>,
    pub alpha: Raster,
    pub depth: Option<Raster>,
    pub feature: Option<Raster>,
    pub trace: Option<CompositeTrace>,
    /// Primitive ids by storage index of the rendered slice.
    pub ids: Vec<PrimitiveId>,
    pub roi: PixelRect,
    pub(crate) fingerprint: u64,
}

impl RenderOutput {
    /// Ordered `(primitive_id, weight)` pairs at a pixel. Requires a trace.
    pub fn weights_at(&self, x: usize, y: usize) -> Vec<(PrimitiveId, f64)> {
        let trace = self.trace.as_ref().expect("render was run without keep_trace");
        trace
            .pixel(y * self.width + x)
            .iter()
            .map(|e| (self.ids[e.index as usize], e.weight))
            .collect()
    }
}

/// Hash of everything the forward pass depends on.
pub(crate) fn fingerprint(prims: &[Primitive], camera: &Camera) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    let mut put = |v: f64| v.to_bits().hash(&mut h);
    for p in prims {
        put(p.id as f64);
        p.position.iter().chain(p.scale.iter()).for_each(|v| put(*v));
        p.rotation.coords.iter().for_each(|v| put(*v));
        put(p.opacity);
        p.color.iter().for_each(|v| put(*v));
        p.feature.iter().for_each(|v| put(*v));
    }
    [camera.fx, camera.fy, camera.cx, camera.cy]
        .iter()
        .chain(camera.rotation.coords.iter())
        .chain(camera.translation.iter())
        .for_each(|v| put(*v));
    put(camera.width as f64);
    put(camera.height as f64);
    h.finish()
}

struct TileRow {
    rgb: Vec<f64>,
    alpha: Vec<f64>,
    depth: Vec<f64>,
    feature: Vec<f64>,
    counts: Vec<u32>,
    entries: Vec<TraceEntry>,
}

/// Render a scene from one camera.
pub fn render(scene: &Scene, camera: &Camera, opts: &RenderOptions) -> RenderOutput {
    render_primitives(&scene.primitives, scene.feature_dim, camera, opts)
}

/// Render an explicit primitive slice. Zero primitives give all-zero images.
pub fn render_primitives(
    prims: &[Primitive],
    feature_dim: usize,
    camera: &Camera,
    opts: &RenderOptions,
) -> RenderOutput {
    let (width, height) = camera.dims();
    let roi = opts.roi.unwrap_or(PixelRect::full(width, height));
    let roi = PixelRect {
        x0: roi.x0.min(width),
        y0: roi.y0.min(height),
        x1: roi.x1.min(width),
        y1: roi.y1.min(height),
    };
    let ch = opts.channels;
    let dim = if ch.feature { feature_dim } else { 0 };

    let splats: Vec<Splat2D> = project_splats(prims, camera)
        .into_iter()
        .filter(|s| {
            s.bbox[2] >= roi.x0 as i64
                && s.bbox[0] < roi.x1 as i64
                && s.bbox[3] >= roi.y0 as i64
                && s.bbox[1] < roi.y1 as i64
        })
        .collect();

    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let tx0 = s.bbox[0] as usize / TILE;
        let tx1 = s.bbox[2] as usize / TILE;
        let ty0 = s.bbox[1] as usize / TILE;
        let ty1 = s.bbox[3] as usize / TILE;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(si as u32);
            }
        }
    }

    let colors: Vec<&Vector3<f64>> = prims.iter().map(|p| &p.color).collect();
    let shade_row = |ty: usize| -> TileRow {
        let y_begin = (ty * TILE).max(roi.y0);
        let y_end = ((ty + 1) * TILE).min(height).min(roi.y1);
        let rows = y_end.saturating_sub(y_begin);
        let mut out = TileRow {
            rgb: vec![0.0; if ch.rgb { rows * width * 3 } else { 0 }],
            alpha: vec![0.0; rows * width],
            depth: vec![0.0; if ch.depth { rows * width } else { 0 }],
            feature: vec![0.0; rows * width * dim],
            counts: vec![0; if opts.keep_trace { rows * width } else { 0 }],
            entries: Vec::new(),
        };
        for y in y_begin..y_end {
            for tx in 0..tiles_x {
                let x_begin = (tx * TILE).max(roi.x0);
                let x_end = ((tx + 1) * TILE).min(width).min(roi.x1);
                let bin = &bins[ty * tiles_x + tx];
                for x in x_begin..x_end {
                    let local = (y - y_begin) * width + x;
                    let (xf, yf) = (x as f64, y as f64);
                    let mut t = 1.0;
                    let mut acc_alpha = 0.0;
                    let mut acc_depth = 0.0;
                    let mut n = 0u32;
                    for &si in bin {
                        let s = &splats[si as usize];
                        let (xi, yi) = (x as i64, y as i64);
                        if xi < s.bbox[0] || xi > s.bbox[2] || yi < s.bbox[1] || yi > s.bbox[3] {
                            continue;
                        }
                        let g = s.footprint(xf, yf);
                        if g <= 0.0 {
                            continue;
                        }
                        let a = s.opacity * g;
                        let w = a * t;
                        let idx = s.index as usize;
                        if ch.rgb {
                            let c = colors[idx];
                            let o = local * 3;
                            out.rgb[o] += w * c.x;
                            out.rgb[o + 1] += w * c.y;
                            out.rgb[o + 2] += w * c.z;
                        }
                        if dim > 0 {
                            let f = &prims[idx].feature;
                            let o = local * dim;
                            for (dst, v) in out.feature[o..o + dim].iter_mut().zip(f) {
                                *dst += w * v;
                            }
                        }
                        acc_alpha += w;
                        acc_depth += w * s.depth;
                        if opts.keep_trace {
                            out.entries.push(TraceEntry {
                                index: s.index,
                                weight: w,
                                footprint: g,
                                transmittance: t,
                            });
                            n += 1;
                        }
                        t *= 1.0 - a;
                        if t < MIN_TRANSMITTANCE {
                            break;
                        }
                    }
                    out.alpha[local] = acc_alpha;
                    if ch.depth && acc_alpha > 0.0 {
                        out.depth[local] = acc_depth / acc_alpha;
                    }
                    if opts.keep_trace {
                        out.counts[local] = n;
                    }
                }
            }
        }
        // rows are visited top to bottom and tiles left to right, so trace
        // entries are already in row-major pixel order
        out
    };

    let tile_rows: Vec<TileRow> = (0..tiles_y).into_par_iter().map(shade_row).collect();

    let npix = width * height;
    let mut rgb = ch.rgb.then(|| Raster::new(width, height, 3));
    let mut alpha = Raster::new(width, height, 1);
    let mut depth = ch.depth.then(|| Raster::new(width, height, 1));
    let mut feature = ch.feature.then(|| Raster::new(width, height, feature_dim));
    let mut trace = opts.keep_trace.then(|| CompositeTrace {
        offsets: vec![0; npix + 1],
        entries: Vec::new(),
    });
    let mut counts = if opts.keep_trace { vec![0u32; npix] } else { Vec::new() };
    for (ty, tr) in tile_rows.into_iter().enumerate() {
        let y_begin = (ty * TILE).max(roi.y0);
        let base = y_begin * width;
        let rows = tr.alpha.len() / width.max(1);
        if rows == 0 {
            continue;
        }
        alpha.data[base..base + rows * width].copy_from_slice(&tr.alpha);
        if let Some(r) = rgb.as_mut() {
            r.data[base * 3..(base + rows * width) * 3].copy_from_slice(&tr.rgb);
        }
        if let Some(d) = depth.as_mut() {
            d.data[base..base + rows * width].copy_from_slice(&tr.depth);
        }
        if let Some(f) = feature.as_mut() {
            f.data[base * dim..(base + rows * width) * dim].copy_from_slice(&tr.feature);
        }
        if let Some(t) = trace.as_mut() {
            counts[base..base + rows * width].copy_from_slice(&tr.counts);
            t.entries.extend_from_slice(&tr.entries);
        }
    }
    if let Some(t) = trace.as_mut() {
        let mut acc = 0u32;
        for (p, c) in counts.iter().enumerate() {
            t.offsets[p] = acc;
            acc += c;
        }
        t.offsets[npix] = acc;
    }

    RenderOutput {
        width,
        height,
        rgb,
        alpha,
        depth,
        feature,
        trace,
        ids: prims.iter().map(|p| p.id).collect(),
        roi,
        fingerprint: if opts.keep_trace { fingerprint(prims, camera) } else { 0 },
    }
}
