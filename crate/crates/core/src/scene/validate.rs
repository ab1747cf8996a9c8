use std::collections::HashSet;
use std::fmt;

use super::{Camera, Primitive, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    NonFinite,
    QuaternionNorm,
    ScaleRange,
    OpacityRange,
    ColorRange,
    FeatureLength,
    DuplicateId,
    CameraIntrinsics,
    CameraPrincipalPoint,
    CameraOrder,
}

/// One invariant violation; `subject` names the offending primitive or frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub subject: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at {}: {}", self.kind, self.subject, self.detail)
    }
}

const QUAT_TOL: f64 = 1e-6;
const SCALE_MIN: f64 = 1e-4;
const SCALE_MAX: f64 = 1e3;

fn push(out: &mut Vec<Violation>, kind: ViolationKind, subject: String, detail: String) {
    out.push(Violation { kind, subject, detail });
}

fn check_primitive(p: &Primitive, dim: usize, out: &mut Vec<Violation>) {
    let subject = format!("primitive {}", p.id);
    let finite = p.position.iter().all(|v| v.is_finite())
        && p.scale.iter().all(|v| v.is_finite())
        && p.rotation.coords.iter().all(|v| v.is_finite())
        && p.opacity.is_finite()
        && p.color.iter().all(|v| v.is_finite())
        && p.feature.iter().all(|v| v.is_finite());
    if !finite {
        push(out, ViolationKind::NonFinite, subject, "non-finite attribute".into());
        return;
    }
    let qn = p.rotation.norm();
    if (qn - 1.0).abs() > QUAT_TOL {
        push(out, ViolationKind::QuaternionNorm, subject.clone(), format!("|q| = {qn}"));
    }
    if p.scale.iter().any(|&s| !(SCALE_MIN..=SCALE_MAX).contains(&s)) {
        push(
            out,
            ViolationKind::ScaleRange,
            subject.clone(),
            format!("scale {:?} outside [{SCALE_MIN}, {SCALE_MAX}]", p.scale.as_slice()),
        );
    }
    if !(0.0..=1.0).contains(&p.opacity) {
        push(out, ViolationKind::OpacityRange, subject.clone(), format!("opacity {}", p.opacity));
    }
    if p.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
        push(out, ViolationKind::ColorRange, subject.clone(), format!("color {:?}", p.color.as_slice()));
    }
    if p.feature.len() != dim {
        push(
            out,
            ViolationKind::FeatureLength,
            subject,
            format!("feature length {} != feature_dim {dim}", p.feature.len()),
        );
    }
}

fn check_camera(c: &Camera, out: &mut Vec<Violation>) {
    let subject = format!("camera {}", c.frame_index);
    let finite = [c.fx, c.fy, c.cx, c.cy].iter().all(|v| v.is_finite())
        && c.rotation.coords.iter().all(|v| v.is_finite())
        && c.translation.iter().all(|v| v.is_finite());
    if !finite {
        push(out, ViolationKind::NonFinite, subject, "non-finite camera parameter".into());
        return;
    }
    if c.fx <= 0.0 || c.fy <= 0.0 {
        push(out, ViolationKind::CameraIntrinsics, subject.clone(), format!("fx={} fy={}", c.fx, c.fy));
    }
    if !(0.0..c.width as f64).contains(&c.cx) || !(0.0..c.height as f64).contains(&c.cy) {
        push(
            out,
            ViolationKind::CameraPrincipalPoint,
            subject.clone(),
            format!("principal point ({}, {}) outside {}x{}", c.cx, c.cy, c.width, c.height),
        );
    }
    let qn = c.rotation.norm();
    if (qn - 1.0).abs() > QUAT_TOL {
        push(out, ViolationKind::QuaternionNorm, subject, format!("|q| = {qn}"));
    }
}

/// Check every scene invariant. An empty report means the scene is valid.
pub fn validate_scene(scene: &Scene) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::with_capacity(scene.primitives.len());
    for p in &scene.primitives {
        if !seen.insert(p.id) {
            push(&mut out, ViolationKind::DuplicateId, format!("primitive {}", p.id), "id repeated".into());
        }
        check_primitive(p, scene.feature_dim, &mut out);
    }
    for c in &scene.cameras {
        check_camera(c, &mut out);
    }
    for w in scene.cameras.windows(2) {
        if w[1].frame_index <= w[0].frame_index {
            push(
                &mut out,
                ViolationKind::CameraOrder,
                format!("camera {}", w[1].frame_index),
                format!("frame index not greater than predecessor {}", w[0].frame_index),
            );
        }
    }
    if scene.trajectory.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        push(&mut out, ViolationKind::NonFinite, "trajectory".into(), "non-finite sample".into());
    }
    out
}

#[cfg(test)]
mod tests {
    use nalgebra::{Quaternion, Vector3};

    use super::*;

    fn prim(id: u32) -> Primitive {
        Primitive {
            id,
            position: Vector3::zeros(),
            scale: Vector3::repeat(0.1),
            rotation: Quaternion::identity(),
            opacity: 0.5,
            color: Vector3::repeat(0.5),
            feature: vec![0.0; 4],
        }
    }

    fn scene_with(p: Primitive) -> Scene {
        let mut s = Scene::new(4);
        s.primitives.push(p);
        s
    }

    #[test]
    fn valid_primitive_has_empty_report() {
        assert!(validate_scene(&scene_with(prim(0))).is_empty());
    }

    #[test]
    fn opacity_out_of_range() {
        let mut p = prim(0);
        p.opacity = 1.2;
        let r = validate_scene(&scene_with(p));
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].kind, ViolationKind::OpacityRange);
    }

    #[test]
    fn non_unit_quaternion() {
        let mut p = prim(0);
        p.rotation = Quaternion::new(2.0, 0.0, 0.0, 0.0);
        let r = validate_scene(&scene_with(p));
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].kind, ViolationKind::QuaternionNorm);
    }

    #[test]
    fn duplicate_ids_and_bad_feature_length() {
        let mut s = scene_with(prim(3));
        let mut q = prim(3);
        q.feature.push(1.0);
        s.primitives.push(q);
        let kinds: Vec<_> = validate_scene(&s).into_iter().map(|v| v.kind).collect();
        assert!(kinds.contains(&ViolationKind::DuplicateId));
        assert!(kinds.contains(&ViolationKind::FeatureLength));
    }

    #[test]
    fn nan_is_reported() {
        let mut p = prim(0);
        p.position.x = f64::NAN;
        assert_eq!(validate_scene(&scene_with(p))[0].kind, ViolationKind::NonFinite);
    }
}
