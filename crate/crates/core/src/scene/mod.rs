//! Scene data model: Gaussian primitives, pinhole cameras, masks and feature
//! maps, with invariant validation and on-disk formats.
//!
//! Conventions used throughout the crate:
//! - world frame is z-up, lengths in meters;
//! - quaternions are scalar-first `(w, x, y, z)`;
//! - cameras look along +Z, image x to the right, image y down;
//! - `world_to_camera` maps a world point `p` to `R * p + t`.

mod io;
mod validate;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

pub use io::{
    frame_file_name, list_frame_files, load_depth_pgm16, load_feature_dir, load_feature_map, load_image,
    load_image_dir, load_mask, load_mask_dir, load_scene, save_depth_pgm16, save_feature_map, save_image, save_mask,
    save_scene, scene_from_bytes, scene_to_bytes, MAGIC, SCENE_VERSION,
};
pub use validate::{validate_scene, Violation, ViolationKind};

use crate::bev::GroundManifold;
use crate::raster::{Bitmap, Raster};

pub type PrimitiveId = u32;

/// One anisotropic 3D Gaussian. In this crate each anchor owns exactly one
/// primitive, so anchor ids and primitive ids coincide.
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub id: PrimitiveId,
    pub position: Vector3<f64>,
    /// Per-axis standard deviations in meters.
    pub scale: Vector3<f64>,
    /// Scalar-first; not normalized on storage so validation can see drift.
    pub rotation: Quaternion<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub feature: Vec<f64>,
}

impl Primitive {
    /// World-space covariance `R S S^T R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = UnitQuaternion::from_quaternion(self.rotation).to_rotation_matrix();
        let s = Matrix3::from_diagonal(&self.scale);
        let m = r.matrix() * s;
        m * m.transpose()
    }
}

/// Pinhole camera with a world-to-camera rigid transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub frame_index: u32,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Quaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        UnitQuaternion::from_quaternion(self.rotation)
            .to_rotation_matrix()
            .into_inner()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation)
    }

    /// Unit world-space direction of the ray through pixel `(px, py)`.
    pub fn ray_direction(&self, px: f64, py: f64) -> Vector3<f64> {
        let d_cam = Vector3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        (self.rotation_matrix().transpose() * d_cam).normalize()
    }

    /// Build a camera at `eye` looking at `target` with world +z as up.
    pub fn look_at(
        frame_index: u32,
        width: u32,
        height: u32,
        focal: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
    ) -> Camera {
        let forward = (target - eye).normalize();
        let up = Vector3::z();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        // rows of R are the camera axes expressed in world coordinates
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let q = UnitQuaternion::from_matrix(&r);
        let t = -(r * eye);
        Camera {
            frame_index,
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation: *q.quaternion(),
            translation: t,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width as usize, self.height as usize)
    }
}

/// The reconstructed scene: primitives plus capture metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub version: u32,
    pub feature_dim: usize,
    pub primitives: Vec<Primitive>,
    pub cameras: Vec<Camera>,
    /// Vehicle positions along the capture, meters.
    pub trajectory: Vec<Vector3<f64>>,
    pub manifold: Option<GroundManifold>,
}

impl Scene {
    pub fn new(feature_dim: usize) -> Self {
        Scene {
            version: SCENE_VERSION,
            feature_dim,
            primitives: Vec::new(),
            cameras: Vec::new(),
            trajectory: Vec::new(),
            manifold: None,
        }
    }

    pub fn camera(&self, frame_index: u32) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.frame_index == frame_index)
    }

    pub fn primitive(&self, id: PrimitiveId) -> Option<&Primitive> {
        self.primitives.iter().find(|p| p.id == id)
    }

    /// Map from primitive id to storage index.
    pub fn id_lookup(&self) -> std::collections::HashMap<PrimitiveId, usize> {
        self.primitives.iter().enumerate().map(|(i, p)| (p.id, i)).collect()
    }

    pub fn next_id(&self) -> PrimitiveId {
        self.primitives.iter().map(|p| p.id + 1).max().unwrap_or(0)
    }

    /// Copy of the scene without the given primitives.
    pub fn without(&self, ids: &std::collections::BTreeSet<PrimitiveId>) -> Scene {
        let mut out = self.clone();
        out.primitives.retain(|p| !ids.contains(&p.id));
        out
    }

    /// Axis-aligned bounding box of primitive positions.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let mut it = self.primitives.iter();
        let first = it.next()?;
        let (mut lo, mut hi) = (first.position, first.position);
        for p in it {
            lo = lo.inf(&p.position);
            hi = hi.sup(&p.position);
        }
        Some((lo, hi))
    }
}

/// Per-frame semantic mask of the object to remove (`true` = object).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMask {
    pub frame_index: u32,
    pub mask: Bitmap,
}

impl FrameMask {
    pub fn check_against(&self, camera: &Camera) -> crate::Result<()> {
        let (w, h) = camera.dims();
        if self.mask.width != w || self.mask.height != h {
            return Err(crate::Error::dims(
                format!("mask of frame {}", self.frame_index),
                format!("{w}x{h}"),
                format!("{}x{}", self.mask.width, self.mask.height),
            ));
        }
        Ok(())
    }
}

/// Find the mask for a frame.
pub fn mask_for(masks: &[FrameMask], frame_index: u32) -> Option<&FrameMask> {
    masks.iter().find(|m| m.frame_index == frame_index)
}

/// `H' x W' x D` visual feature map for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub frame_index: u32,
    pub data: Raster,
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        self.data.channels
    }
}
