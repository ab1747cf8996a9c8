//! Ground manifold: an arc-length parameterized road centerline with a
//! tangent / lateral frame at every sample, giving BEV coordinates `(u, v)`.

use nalgebra::{Matrix3, Vector3};

use crate::scene::Scene;
use crate::{Error, Result};

/// Points farther than this from the centerline have no BEV coordinates.
pub const CORRIDOR_HALF_WIDTH: f64 = 50.0;
/// Centerline resampling step, meters.
pub const SAMPLE_STEP: f64 = 1.0;
/// Horizontal radius of the anchor neighborhood used to estimate ground height.
pub const HEIGHT_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifoldSample {
    /// Arc length along the centerline, meters.
    pub s: f64,
    /// Ground point on the centerline.
    pub point: Vector3<f64>,
    /// Unit longitudinal direction.
    pub tangent: Vector3<f64>,
    /// Unit horizontal direction to the left of the tangent.
    pub lateral: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundManifold {
    pub samples: Vec<ManifoldSample>,
}

/// Centerline frame at one arc length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub point: Vector3<f64>,
    pub tangent: Vector3<f64>,
    pub lateral: Vector3<f64>,
}

impl Frame {
    /// Heading of the tangent in the ground plane, radians from +X.
    pub fn heading(&self) -> f64 {
        self.tangent.y.atan2(self.tangent.x)
    }
}

fn lateral_of(t: &Vector3<f64>) -> Vector3<f64> {
    Vector3::z().cross(t).normalize()
}

/// Bucketed anchor positions for neighborhood height queries.
struct HeightField {
    cells: std::collections::HashMap<(i64, i64), Vec<Vector3<f64>>>,
}

impl HeightField {
    fn new(points: impl Iterator<Item = Vector3<f64>>) -> Self {
        let mut cells: std::collections::HashMap<(i64, i64), Vec<Vector3<f64>>> = Default::default();
        for p in points {
            let key = ((p.x / HEIGHT_RADIUS).floor() as i64, (p.y / HEIGHT_RADIUS).floor() as i64);
            cells.entry(key).or_default().push(p);
        }
        HeightField { cells }
    }

    /// Least-squares plane through nearby anchors evaluated at `(x, y)`;
    /// falls back to their mean height, then to `None`.
    fn height(&self, x: f64, y: f64) -> Option<f64> {
        let (cx, cy) = ((x / HEIGHT_RADIUS).floor() as i64, (y / HEIGHT_RADIUS).floor() as i64);
        let mut near = Vec::new();
        for i in cx - 1..=cx + 1 {
            for j in cy - 1..=cy + 1 {
                if let Some(ps) = self.cells.get(&(i, j)) {
                    for p in ps {
                        let (dx, dy) = (p.x - x, p.y - y);
                        if dx * dx + dy * dy <= HEIGHT_RADIUS * HEIGHT_RADIUS {
                            near.push(Vector3::new(dx, dy, p.z));
                        }
                    }
                }
            }
        }
        if near.is_empty() {
            return None;
        }
        let mean = near.iter().map(|p| p.z).sum::<f64>() / near.len() as f64;
        if near.len() < 3 {
            return Some(mean);
        }
        // z = a + b dx + c dy
        let mut ata = Matrix3::zeros();
        let mut atb = Vector3::zeros();
        for p in &near {
            let row = Vector3::new(1.0, p.x, p.y);
            ata += row * row.transpose();
            atb += row * p.z;
        }
        let spread = ata[(1, 1)] * ata[(2, 2)] - ata[(1, 2)] * ata[(1, 2)];
        if spread <= 1e-6 * (near.len() as f64).powi(2) {
            return Some(mean);
        }
        match ata.lu().solve(&atb) {
            Some(sol) if sol[0].is_finite() => Some(sol[0]),
            _ => Some(mean),
        }
    }
}

/// Fit the ground manifold of a scene from its trajectory and anchors.
pub fn fit_ground_manifold(scene: &Scene) -> Result<GroundManifold> {
    GroundManifold::fit(&scene.trajectory, scene.primitives.iter().map(|p| p.position))
}

impl GroundManifold {
    /// Resample the horizontal trajectory at 1 m, drop each sample to the
    /// ground height estimated from nearby anchors (the trajectory's own
    /// height when no anchor is near), and attach finite-difference frames.
    pub fn fit(trajectory: &[Vector3<f64>], anchors: impl Iterator<Item = Vector3<f64>>) -> Result<GroundManifold> {
        if trajectory.len() < 2 {
            return Err(Error::DegenerateTrajectory(format!(
                "need at least 2 trajectory points, got {}",
                trajectory.len()
            )));
        }
        let mut pts: Vec<Vector3<f64>> = vec![trajectory[0]];
        for p in &trajectory[1..] {
            let last = pts.last().expect("non-empty");
            if (p.xy() - last.xy()).norm() > 1e-9 {
                pts.push(*p);
            }
        }
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            cum.push(cum.last().expect("non-empty") + (w[1].xy() - w[0].xy()).norm());
        }
        let total = *cum.last().expect("non-empty");
        if total < 1e-6 {
            return Err(Error::DegenerateTrajectory("trajectory has zero horizontal length".into()));
        }
        let mut stations: Vec<f64> = (0..)
            .map(|i| i as f64 * SAMPLE_STEP)
            .take_while(|s| *s <= total + 1e-9)
            .collect();
        if total - stations.last().expect("non-empty") > 1e-6 {
            stations.push(total);
        }
        let field = HeightField::new(anchors);
        let mut seg = 0;
        let ground: Vec<Vector3<f64>> = stations
            .iter()
            .map(|&s| {
                while seg + 2 < cum.len() && cum[seg + 1] < s {
                    seg += 1;
                }
                let len = cum[seg + 1] - cum[seg];
                let f = ((s - cum[seg]) / len).clamp(0.0, 1.0);
                let p = pts[seg] + (pts[seg + 1] - pts[seg]) * f;
                let z = field.height(p.x, p.y).unwrap_or(p.z);
                Vector3::new(p.x, p.y, z)
            })
            .collect();
        let n = ground.len();
        let mut samples = Vec::with_capacity(n);
        let mut s = 0.0;
        for i in 0..n {
            if i > 0 {
                s += (ground[i] - ground[i - 1]).norm();
            }
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            let tangent = (ground[b] - ground[a]).normalize();
            samples.push(ManifoldSample {
                s,
                point: ground[i],
                tangent,
                lateral: lateral_of(&tangent),
            });
        }
        Ok(GroundManifold { samples })
    }

    pub fn length(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.s)
    }

    /// Frame at arc length `u`; linear extrapolation along the end tangents
    /// beyond either end.
    pub fn frame_at(&self, u: f64) -> Frame {
        let ss = &self.samples;
        let first = &ss[0];
        let last = &ss[ss.len() - 1];
        if u <= first.s {
            return Frame {
                point: first.point + first.tangent * (u - first.s),
                tangent: first.tangent,
                lateral: first.lateral,
            };
        }
        if u >= last.s {
            return Frame {
                point: last.point + last.tangent * (u - last.s),
                tangent: last.tangent,
                lateral: last.lateral,
            };
        }
        let i = ss.partition_point(|x| x.s <= u).saturating_sub(1).min(ss.len() - 2);
        let (a, b) = (&ss[i], &ss[i + 1]);
        let f = (u - a.s) / (b.s - a.s);
        let tangent = (a.tangent * (1.0 - f) + b.tangent * f).normalize();
        Frame {
            point: a.point + (b.point - a.point) * f,
            tangent,
            lateral: lateral_of(&tangent),
        }
    }

    /// Ground point at BEV coordinates.
    pub fn from_bev(&self, u: f64, v: f64) -> Vector3<f64> {
        let f = self.frame_at(u);
        f.point + f.lateral * v
    }

    fn residual(&self, p: &Vector3<f64>, u: f64) -> f64 {
        let f = self.frame_at(u);
        let d = p - f.point;
        d.x * f.tangent.x + d.y * f.tangent.y
    }

    /// BEV coordinates `(u, v)`: `u` is the arc length whose lateral line
    /// passes through `p` (closest such line horizontally), `v` the signed
    /// offset along it, positive to the left.
    pub fn to_bev(&self, p: &Vector3<f64>) -> Result<(f64, f64)> {
        let ss = &self.samples;
        let mut best: Option<(f64, f64)> = None; // (horizontal distance, u)
        let consider = |u: f64, best: &mut Option<(f64, f64)>| {
            let f = self.frame_at(u);
            let d = (p.xy() - f.point.xy()).norm();
            if best.is_none_or(|(bd, _)| d < bd) {
                *best = Some((d, u));
            }
        };
        // extrapolated ends
        let head = self.residual(p, ss[0].s);
        if head <= 0.0 {
            let t = ss[0].tangent;
            consider(ss[0].s + head / (t.x * t.x + t.y * t.y), &mut best);
        }
        let tail_s = ss[ss.len() - 1].s;
        let tail = self.residual(p, tail_s);
        if tail >= 0.0 {
            let t = ss[ss.len() - 1].tangent;
            consider(tail_s + tail / (t.x * t.x + t.y * t.y), &mut best);
        }
        let mut g_prev = head;
        for i in 0..ss.len() - 1 {
            let (s0, s1) = (ss[i].s, ss[i + 1].s);
            let g1 = self.residual(p, s1);
            if g_prev == 0.0 {
                consider(s0, &mut best);
            } else if (g_prev > 0.0) != (g1 > 0.0) && g1 != 0.0 {
                let (mut lo, mut hi, mut glo) = (s0, s1, g_prev);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    let gm = self.residual(p, mid);
                    if (gm > 0.0) == (glo > 0.0) {
                        lo = mid;
                        glo = gm;
                    } else {
                        hi = mid;
                    }
                }
                consider(0.5 * (lo + hi), &mut best);
            }
            g_prev = g1;
        }
        if g_prev == 0.0 {
            consider(tail_s, &mut best);
        }
        let (dist, u) = best.expect("residual changes sign somewhere on the extended line");
        let overshoot = if u < ss[0].s {
            ss[0].s - u
        } else if u > tail_s {
            u - tail_s
        } else {
            0.0
        };
        let reach = (dist * dist + overshoot * overshoot).sqrt();
        if reach > CORRIDOR_HALF_WIDTH {
            return Err(Error::OutOfCorridor {
                distance: reach,
                limit: CORRIDOR_HALF_WIDTH,
            });
        }
        let f = self.frame_at(u);
        let d = p - f.point;
        Ok((u, d.x * f.lateral.x + d.y * f.lateral.y))
    }

    /// Height of `p` above the ground surface (`None` outside the corridor).
    pub fn height_above(&self, p: &Vector3<f64>) -> Option<f64> {
        let (u, _) = self.to_bev(p).ok()?;
        Some(p.z - self.frame_at(u).point.z)
    }

    /// First intersection of a ray with the ground surface within `max_t`.
    pub fn intersect_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_t: f64) -> Option<Vector3<f64>> {
        let h = |t: f64| self.height_above(&(origin + dir * t));
        let mut t0 = 0.05;
        let mut h0 = h(t0);
        while t0 < max_t {
            let t1 = (t0 * 1.05).max(t0 + 0.05).min(max_t);
            let h1 = h(t1);
            if let (Some(a), Some(b)) = (h0, h1) {
                if a > 0.0 && b <= 0.0 {
                    let (mut lo, mut hi) = (t0, t1);
                    for _ in 0..50 {
                        let mid = 0.5 * (lo + hi);
                        match h(mid) {
                            Some(m) if m > 0.0 => lo = mid,
                            Some(_) => hi = mid,
                            None => break,
                        }
                    }
                    return Some(origin + dir * (0.5 * (lo + hi)));
                }
            }
            if t1 >= max_t {
                break;
            }
            t0 = t1;
            h0 = h1;
        }
        None
    }
}
