//! On-disk formats.
//!
//! `scene.gsp` layout (all integers little-endian):
//!
//! | offset | size | content                                        |
//! |--------|------|------------------------------------------------|
//! | 0      | 8    | magic `GSPWSCN\0`                              |
//! | 8      | 4    | format version (u32)                           |
//! | 12     | 4    | reserved, zero                                 |
//! | 16     | 8    | metadata length `L` (u64)                      |
//! | 24     | L    | UTF-8 JSON metadata                            |
//! | 24+L   | ...  | primitive table, `N * (14 + D)` f32 values     |
//!
//! Each table row is `position[3], scale[3], rotation[4] (w,x,y,z), opacity,
//! color[3], feature[D]`. Primitive ids live in the metadata as run-length
//! `[start, count]` ranges in table order.
//!
//! Masks are binary PGM (`P5`, nonzero = masked), images binary 8-bit PPM
//! (`P6`), feature maps `.fmap` = `u32 H, u32 W, u32 D` then row-major f32.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use nalgebra::{Quaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{validate_scene, Camera, FeatureMap, FrameMask, Primitive, Scene};
use crate::bev::{GroundManifold, ManifoldSample};
use crate::raster::{Bitmap, Raster};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GSPWSCN\0";
pub const SCENE_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;
const FIXED_FLOATS: usize = 14;

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    frame_index: u32,
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation_wxyz: [f64; 4],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    s: f64,
    point: [f64; 3],
    tangent: [f64; 3],
    lateral: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    feature_dim: usize,
    primitive_count: usize,
    primitive_ids: Vec<[u32; 2]>,
    cameras: Vec<CameraRecord>,
    trajectory: Vec<[f64; 3]>,
    manifold: Option<Vec<SampleRecord>>,
}

fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn id_ranges(ids: impl Iterator<Item = u32>) -> Vec<[u32; 2]> {
    let mut out: Vec<[u32; 2]> = Vec::new();
    for id in ids {
        match out.last_mut() {
            Some([start, count]) if start.checked_add(*count) == Some(id) => *count += 1,
            _ => out.push([id, 1]),
        }
    }
    out
}

/// Serialize a scene to the `.gsp` byte layout.
pub fn scene_to_bytes(scene: &Scene) -> Vec<u8> {
    let meta = Metadata {
        feature_dim: scene.feature_dim,
        primitive_count: scene.primitives.len(),
        primitive_ids: id_ranges(scene.primitives.iter().map(|p| p.id)),
        cameras: scene
            .cameras
            .iter()
            .map(|c| CameraRecord {
                frame_index: c.frame_index,
                width: c.width,
                height: c.height,
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                rotation_wxyz: [c.rotation.w, c.rotation.i, c.rotation.j, c.rotation.k],
                translation: arr3(&c.translation),
            })
            .collect(),
        trajectory: scene.trajectory.iter().map(arr3).collect(),
        manifold: scene.manifold.as_ref().map(|m| {
            m.samples
                .iter()
                .map(|s| SampleRecord {
                    s: s.s,
                    point: arr3(&s.point),
                    tangent: arr3(&s.tangent),
                    lateral: arr3(&s.lateral),
                })
                .collect()
        }),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let row = FIXED_FLOATS + scene.feature_dim;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + 4 * row * scene.primitives.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&scene.version.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &scene.primitives {
        let q = &p.rotation;
        let fixed = [
            p.position.x,
            p.position.y,
            p.position.z,
            p.scale.x,
            p.scale.y,
            p.scale.z,
            q.w,
            q.i,
            q.j,
            q.k,
            p.opacity,
            p.color.x,
            p.color.y,
            p.color.z,
        ];
        for v in fixed.iter().chain(p.feature.iter()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parse a `.gsp` byte buffer and validate the result.
pub fn scene_from_bytes(bytes: &[u8]) -> Result<Scene> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    if &bytes[0..8] != MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != SCENE_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: SCENE_VERSION,
        });
    }
    let json_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let json_end = HEADER_LEN
        .checked_add(json_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err(16, format!("metadata length {json_len} exceeds file")))?;
    let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..json_end]).map_err(|e| {
        format_err(HEADER_LEN + e.column().saturating_sub(1), format!("metadata: {e}"))
    })?;

    let ids: Vec<u32> = meta
        .primitive_ids
        .iter()
        .flat_map(|[start, count]| (0..*count).map(move |k| start + k))
        .collect();
    if ids.len() != meta.primitive_count {
        return Err(format_err(
            HEADER_LEN,
            format!("{} ids for {} primitives", ids.len(), meta.primitive_count),
        ));
    }
    let row = FIXED_FLOATS + meta.feature_dim;
    let table_len = meta.primitive_count * row * 4;
    if bytes.len() - json_end != table_len {
        return Err(format_err(
            json_end,
            format!("primitive table is {} bytes, expected {table_len}", bytes.len() - json_end),
        ));
    }
    let floats: Vec<f64> = bytes[json_end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let primitives = ids
        .iter()
        .zip(floats.chunks_exact(row))
        .map(|(&id, f)| Primitive {
            id,
            position: Vector3::new(f[0], f[1], f[2]),
            scale: Vector3::new(f[3], f[4], f[5]),
            rotation: Quaternion::new(f[6], f[7], f[8], f[9]),
            opacity: f[10],
            color: Vector3::new(f[11], f[12], f[13]),
            feature: f[FIXED_FLOATS..].to_vec(),
        })
        .collect();

    let scene = Scene {
        version,
        feature_dim: meta.feature_dim,
        primitives,
        cameras: meta
            .cameras
            .into_iter()
            .map(|c| Camera {
                frame_index: c.frame_index,
                width: c.width,
                height: c.height,
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                rotation: Quaternion::new(
                    c.rotation_wxyz[0],
                    c.rotation_wxyz[1],
                    c.rotation_wxyz[2],
                    c.rotation_wxyz[3],
                ),
                translation: c.translation.into(),
            })
            .collect(),
        trajectory: meta.trajectory.into_iter().map(Vector3::from).collect(),
        manifold: meta.manifold.map(|samples| GroundManifold {
            samples: samples
                .into_iter()
                .map(|s| ManifoldSample {
                    s: s.s,
                    point: s.point.into(),
                    tangent: s.tangent.into(),
                    lateral: s.lateral.into(),
                })
                .collect(),
        }),
    };
    let report = validate_scene(&scene);
    if !report.is_empty() {
        let shown: Vec<String> = report.iter().take(5).map(|v| v.to_string()).collect();
        return Err(Error::Validation(format!(
            "{} violation(s): {}",
            report.len(),
            shown.join("; ")
        )));
    }
    Ok(scene)
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    scene_from_bytes(&bytes)
}

/// Write a scene. Refuses scenes that fail validation.
pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let report = validate_scene(scene);
    if let Some(v) = report.first() {
        return Err(Error::Validation(format!("{} violation(s), first: {v}", report.len())));
    }
    let path = path.as_ref();
    fs::write(path, scene_to_bytes(scene)).map_err(|e| Error::io(path, e))
}

fn write_pnm(path: &Path, data: &[u8], w: usize, h: usize, color: ExtendedColorType) -> Result<()> {
    let subtype = match color {
        ExtendedColorType::Rgb8 => PnmSubtype::Pixmap(SampleEncoding::Binary),
        _ => PnmSubtype::Graymap(SampleEncoding::Binary),
    };
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(subtype)
        .write_image(data, w as u32, h as u32, color)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_pnm(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load(Cursor::new(bytes), ImageFormat::Pnm).map_err(|e| Error::Format {
        offset: 0,
        message: format!("{}: {e}", path.display()),
    })
}

pub fn save_mask(mask: &Bitmap, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_pnm(path.as_ref(), &data, mask.width, mask.height, ExtendedColorType::L8)
}

pub fn load_mask(path: impl AsRef<Path>, frame_index: u32) -> Result<FrameMask> {
    let img = read_pnm(path.as_ref())?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(FrameMask {
        frame_index,
        mask: Bitmap {
            width: w as usize,
            height: h as usize,
            bits: img.as_raw().iter().map(|&v| v != 0).collect(),
        },
    })
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write the first three channels of a raster as an 8-bit PPM.
pub fn save_image(img: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let mut data = Vec::with_capacity(img.width * img.height * 3);
    for px in img.data.chunks_exact(img.channels) {
        for c in 0..3 {
            data.push(quantize8(px[c.min(img.channels - 1)]));
        }
    }
    write_pnm(path.as_ref(), &data, img.width, img.height, ExtendedColorType::Rgb8)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Raster> {
    let img = read_pnm(path.as_ref())?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Raster::from_vec(
        w as usize,
        h as usize,
        3,
        img.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
    ))
}

/// Write a single-channel raster as 16-bit PGM with `value * scale` rounded
/// and clamped to `[0, 65535]`.
pub fn save_depth_pgm16(img: &Raster, scale: f64, path: impl AsRef<Path>) -> Result<()> {
    let mut data = Vec::with_capacity(img.width * img.height * 2);
    for px in img.data.chunks_exact(img.channels) {
        let v = (px[0] * scale).round().clamp(0.0, 65535.0) as u16;
        data.extend_from_slice(&v.to_be_bytes());
    }
    // the PNM encoder has no 16-bit grayscale path, so the header is written
    // directly; samples are big-endian as the format requires
    let path = path.as_ref();
    let mut buf = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    buf.extend_from_slice(&data);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read a 16-bit (or 8-bit) PGM and divide by `scale`.
pub fn load_depth_pgm16(path: impl AsRef<Path>, scale: f64) -> Result<Raster> {
    let img = read_pnm(path.as_ref())?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(Raster::from_vec(
        w as usize,
        h as usize,
        1,
        img.as_raw().iter().map(|&v| v as f64 / scale).collect(),
    ))
}

pub fn save_feature_map(fm: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(12 + fm.data.len() * 4);
    out.extend_from_slice(&(fm.height as u32).to_le_bytes());
    out.extend_from_slice(&(fm.width as u32).to_le_bytes());
    out.extend_from_slice(&(fm.channels as u32).to_le_bytes());
    for v in &fm.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_feature_map(path: impl AsRef<Path>, frame_index: u32) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(format_err(bytes.len(), "truncated feature map header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (h, w, d) = (word(0), word(1), word(2));
    let expected = 12 + h * w * d * 4;
    if bytes.len() != expected {
        return Err(format_err(12, format!("feature map payload {} bytes, expected {expected}", bytes.len())));
    }
    let data: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "{}: non-finite feature value at index {i}",
            path.display()
        )));
    }
    Ok(FeatureMap {
        frame_index,
        data: Raster::from_vec(w, h, d, data),
    })
}


/// File name of a per-frame artifact: `frame_0007.ppm`.
pub fn frame_file_name(frame_index: u32, ext: &str) -> String {
    format!("frame_{frame_index:04}.{ext}")
}

/// Frame-indexed files `frame_XXXX.<ext>` in a directory, sorted by index.
pub fn list_frame_files(dir: impl AsRef<Path>, ext: &str) -> Result<Vec<(u32, std::path::PathBuf)>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if let Some(idx) = stem.strip_prefix("frame_").and_then(|n| n.parse::<u32>().ok()) {
            out.push((idx, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Load every `frame_XXXX.pgm` mask of a directory.
pub fn load_mask_dir(dir: impl AsRef<Path>) -> Result<Vec<FrameMask>> {
    list_frame_files(dir, "pgm")?
        .into_iter()
        .map(|(i, p)| load_mask(p, i))
        .collect()
}

/// Load every `frame_XXXX.ppm` image of a directory.
pub fn load_image_dir(dir: impl AsRef<Path>) -> Result<Vec<(u32, Raster)>> {
    list_frame_files(dir, "ppm")?
        .into_iter()
        .map(|(i, p)| load_image(p).map(|img| (i, img)))
        .collect()
}

/// Load every `frame_XXXX.fmap` feature map of a directory.
pub fn load_feature_dir(dir: impl AsRef<Path>) -> Result<Vec<FeatureMap>> {
    list_frame_files(dir, "fmap")?
        .into_iter()
        .map(|(i, p)| load_feature_map(p, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scene(dim: usize) -> Scene {
        let mut s = Scene::new(dim);
        s.primitives.push(Primitive {
            id: 7,
            position: Vector3::new(1.0, 2.0, 0.5),
            scale: Vector3::new(0.25, 0.25, 0.125),
            rotation: Quaternion::identity(),
            opacity: 0.75,
            color: Vector3::new(0.5, 0.25, 1.0),
            feature: vec![0.5; dim],
        });
        s.cameras.push(Camera::look_at(
            0,
            32,
            16,
            20.0,
            Vector3::new(0.0, 0.0, 1.5),
            Vector3::new(5.0, 0.0, 0.0),
        ));
        s
    }

    #[test]
    fn minimal_round_trip() {
        let s = tiny_scene(3);
        let bytes = scene_to_bytes(&s);
        let back = scene_from_bytes(&bytes).unwrap();
        assert_eq!(back.primitives.len(), 1);
        assert_eq!(back, s);
        assert_eq!(scene_to_bytes(&back), bytes);
    }

    #[test]
    fn empty_scene_records_zero_primitives() {
        let s = Scene::new(16);
        let bytes = scene_to_bytes(&s);
        let len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[24..24 + len]).unwrap();
        assert_eq!(meta["primitive_count"], 0);
        assert_eq!(meta["feature_dim"], 16);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = scene_to_bytes(&tiny_scene(2));
        bytes[9] = 7;
        assert!(matches!(scene_from_bytes(&bytes), Err(Error::UnsupportedVersion { .. })));
        bytes[0] = b'X';
        assert!(matches!(scene_from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(scene_from_bytes(&bytes[..10]), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_table_reports_offset() {
        let bytes = scene_to_bytes(&tiny_scene(2));
        let err = scene_from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset >= 24),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_payload_is_a_validation_error() {
        let mut bytes = scene_to_bytes(&tiny_scene(2));
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(scene_from_bytes(&bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn id_ranges_compress_runs() {
        assert_eq!(id_ranges([0, 1, 2, 5, 6, 9].into_iter()), vec![[0, 3], [5, 2], [9, 1]]);
    }

    #[test]
    fn pnm_and_fmap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Bitmap::new(5, 3);
        m.set(1, 2, true);
        save_mask(&m, dir.path().join("m.pgm")).unwrap();
        let raw = fs::read(dir.path().join("m.pgm")).unwrap();
        assert!(raw.starts_with(b"P5"));
        assert_eq!(load_mask(dir.path().join("m.pgm"), 4).unwrap().mask, m);

        let mut img = Raster::new(4, 2, 3);
        img.set(3, 1, 2, 1.0);
        img.set(0, 0, 0, 128.0 / 255.0);
        save_image(&img, dir.path().join("i.ppm")).unwrap();
        assert!(fs::read(dir.path().join("i.ppm")).unwrap().starts_with(b"P6"));
        assert_eq!(load_image(dir.path().join("i.ppm")).unwrap(), img);

        let mut fm = Raster::new(3, 2, 4);
        fm.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.5);
        save_feature_map(&fm, dir.path().join("f.fmap")).unwrap();
        let raw = fs::read(dir.path().join("f.fmap")).unwrap();
        assert_eq!(&raw[0..4], &2u32.to_le_bytes());
        assert_eq!(&raw[4..8], &3u32.to_le_bytes());
        assert_eq!(load_feature_map(dir.path().join("f.fmap"), 0).unwrap().data, fm);

        let mut depth = Raster::new(2, 2, 1);
        depth.data = vec![0.0, 1.5, 2.25, 70.0];
        save_depth_pgm16(&depth, 1000.0, dir.path().join("d.pgm")).unwrap();
        let back = load_depth_pgm16(dir.path().join("d.pgm"), 1000.0).unwrap();
        assert_eq!(back.data, vec![0.0, 1.5, 2.25, 65.535]);
    }
}
