//! Slow, literal reference implementations used by the test suites to check
//! the optimized code paths. Nothing in the pipeline calls into this module.

use nalgebra::{Matrix3, Matrix3x4, Quaternion, UnitQuaternion, Vector3, Vector4};
use rand::Rng;

use crate::raster::Raster;
use crate::scene::{Camera, Primitive};

/// Homogeneous-coordinate projection `K [R | t] X`: returns `(px, py, depth)`.
pub fn project_homogeneous(p: &Vector3<f64>, cam: &Camera) -> (f64, f64, f64) {
    let k = Matrix3::new(cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0);
    let r = cam.rotation_matrix();
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    rt.set_column(3, &cam.translation);
    let h = k * rt * Vector4::new(p.x, p.y, p.z, 1.0);
    (h.x / h.z, h.y / h.z, h.z)
}

/// Images from [`naive_render`].
pub struct NaiveImages {
    pub rgb: Raster,
    pub alpha: Raster,
    pub depth: Raster,
    pub feature: Raster,
}

struct NaiveSplat {
    id: u32,
    index: usize,
    mean: (f64, f64),
    inv: [[f64; 2]; 2],
    depth: f64,
}

/// Literal per-pixel compositing loop: every pixel visits every splat in
/// (depth, id) order with no tiling or bounding boxes.
pub fn naive_render(prims: &[Primitive], feature_dim: usize, cam: &Camera) -> NaiveImages {
    let (w, h) = cam.dims();
    let r = cam.rotation_matrix();
    let mut splats = Vec::new();
    for (index, p) in prims.iter().enumerate() {
        let (px, py, z) = project_homogeneous(&p.position, cam);
        let pc = r * p.position + cam.translation;
        let lim_x = 1.3 * cam.cx.max(w as f64 - cam.cx) / cam.fx;
        let lim_y = 1.3 * cam.cy.max(h as f64 - cam.cy) / cam.fy;
        if z <= 0.05 || (pc.x / pc.z).abs() > lim_x || (pc.y / pc.z).abs() > lim_y {
            continue;
        }
        // Jacobian of (fx x / z, fy y / z) at the camera-space mean
        let j = [
            [cam.fx / pc.z, 0.0, -cam.fx * pc.x / (pc.z * pc.z)],
            [0.0, cam.fy / pc.z, -cam.fy * pc.y / (pc.z * pc.z)],
        ];
        let rot = UnitQuaternion::from_quaternion(p.rotation).to_rotation_matrix().into_inner();
        let m = r * rot;
        let mut cov_cam = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                cov_cam[a][b] = (0..3).map(|k| m[(a, k)] * p.scale[k] * p.scale[k] * m[(b, k)]).sum();
            }
        }
        let mut c = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let mut s = 0.0;
                for k in 0..3 {
                    for l in 0..3 {
                        s += j[a][k] * cov_cam[k][l] * j[b][l];
                    }
                }
                c[a][b] = s;
            }
        }
        c[0][0] += 0.05;
        c[1][1] += 0.05;
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        if det <= 0.0 {
            continue;
        }
        splats.push(NaiveSplat {
            id: p.id,
            index,
            mean: (px, py),
            inv: [[c[1][1] / det, -c[0][1] / det], [-c[1][0] / det, c[0][0] / det]],
            depth: z,
        });
    }
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.id.cmp(&b.id)));

    let mut out = NaiveImages {
        rgb: Raster::new(w, h, 3),
        alpha: Raster::new(w, h, 1),
        depth: Raster::new(w, h, 1),
        feature: Raster::new(w, h, feature_dim),
    };
    for y in 0..h {
        for x in 0..w {
            let mut t = 1.0;
            let mut acc = 0.0;
            let mut acc_d = 0.0;
            for s in &splats {
                let dx = x as f64 - s.mean.0;
                let dy = y as f64 - s.mean.1;
                let m = dx * (s.inv[0][0] * dx + s.inv[0][1] * dy) + dy * (s.inv[1][0] * dx + s.inv[1][1] * dy);
                if m > 9.0 {
                    continue;
                }
                let g = (-0.5 * m).exp().min(1.0);
                let p = &prims[s.index];
                let a = p.opacity * g;
                let wgt = a * t;
                for c in 0..3 {
                    let v = out.rgb.get(x, y, c) + wgt * p.color[c];
                    out.rgb.set(x, y, c, v);
                }
                for d in 0..feature_dim {
                    let v = out.feature.get(x, y, d) + wgt * p.feature[d];
                    out.feature.set(x, y, d, v);
                }
                acc += wgt;
                acc_d += wgt * s.depth;
                t *= 1.0 - a;
                if t < 1e-4 {
                    break;
                }
            }
            out.alpha.set(x, y, 0, acc);
            if acc > 0.0 {
                out.depth.set(x, y, 0, acc_d / acc);
            }
        }
    }
    out
}

/// Random unit quaternion.
pub fn random_rotation<R: Rng>(rng: &mut R) -> Quaternion<f64> {
    loop {
        let q = Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.1 && n <= 1.0 {
            return q / n;
        }
    }
}

/// A camera at the origin looking down +Z.
pub fn axis_camera(width: u32, height: u32, focal: f64) -> Camera {
    Camera {
        frame_index: 0,
        width,
        height,
        fx: focal,
        fy: focal,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        rotation: Quaternion::identity(),
        translation: Vector3::zeros(),
    }
}

/// Random primitives in front of [`axis_camera`], all at least partly in view.
pub fn fuzz_primitives<R: Rng>(rng: &mut R, n: usize, feature_dim: usize) -> Vec<Primitive> {
    (0..n)
        .map(|i| {
            let z = rng.gen_range(2.0..8.0);
            Primitive {
                id: i as u32 * 3 + 1,
                position: Vector3::new(rng.gen_range(-0.4..0.4) * z, rng.gen_range(-0.4..0.4) * z, z),
                scale: Vector3::new(
                    rng.gen_range(0.05..0.5),
                    rng.gen_range(0.05..0.5),
                    rng.gen_range(0.05..0.5),
                ),
                rotation: random_rotation(rng),
                opacity: rng.gen_range(0.05..0.95),
                color: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                feature: (0..feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            }
        })
        .collect()
}

/// Relative error with an absolute floor, for gradient checks.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
