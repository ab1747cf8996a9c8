//! Region-aware image metrics and inpainting reports.
//!
//! PSNR and SSIM stand in for learned perceptual metrics. Region metrics are
//! restricted to the target masks; regions smaller than
//! [`MIN_REGION_PIXELS`] are reported as insufficient instead of scored.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::fit::{ssim, ssim_region};
use crate::raster::{Bitmap, Raster};
use crate::{Error, Result};

/// Regions with fewer pixels than this are not scored.
pub const MIN_REGION_PIXELS: usize = 100;

/// Serializes decibel values with `"inf"` standing in for +infinity (JSON has
/// no infinity literal).
mod db {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            #[derive(Deserialize)]
            struct Wrap(#[serde(deserialize_with = "super::deserialize")] f64);
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}

fn check_mask(a: &Raster, mask: &Bitmap) -> Result<()> {
    if (mask.width, mask.height) != (a.width, a.height) {
        return Err(Error::dims(
            "metric mask",
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", mask.width, mask.height),
        ));
    }
    Ok(())
}

/// Sum of squared differences and the number of values it covers.
fn squared_error(a: &Raster, b: &Raster, mask: Option<&Bitmap>) -> Result<(f64, usize)> {
    if !a.same_shape(b) {
        return Err(Error::dims("psnr inputs", a.shape_string(), b.shape_string()));
    }
    if let Some(m) = mask {
        check_mask(a, m)?;
    }
    let ch = a.channels;
    let (mut se, mut n) = (0.0, 0usize);
    for p in 0..a.width * a.height {
        if mask.is_some_and(|m| !m.bits[p]) {
            continue;
        }
        for c in 0..ch {
            let d = a.data[p * ch + c] - b.data[p * ch + c];
            se += d * d;
        }
        n += ch;
    }
    Ok((se, n))
}

fn psnr_from(se: f64, n: usize) -> f64 {
    if se == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / (se / n as f64)).log10()
    }
}

/// Peak signal-to-noise ratio in dB with peak 1.0, over the masked pixels if a
/// mask is given. Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Raster, b: &Raster, mask: Option<&Bitmap>) -> Result<f64> {
    let (se, n) = squared_error(a, b, mask)?;
    if n == 0 {
        return Err(Error::Validation("psnr over an empty pixel set".into()));
    }
    Ok(psnr_from(se, n))
}

/// Metrics restricted to one target region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub pixels: usize,
    /// False when the region is smaller than [`MIN_REGION_PIXELS`]; the scores
    /// are then absent.
    pub sufficient: bool,
    #[serde(with = "db::opt")]
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame_index: u32,
    #[serde(with = "db")]
    pub psnr: f64,
    pub ssim: f64,
    pub region: RegionMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub frames: usize,
    /// PSNR of the pooled squared error over every evaluated pixel.
    #[serde(with = "db")]
    pub psnr: f64,
    /// Mean of per-frame SSIM.
    pub ssim: f64,
    /// Pooled over the sufficient regions; absent when there are none.
    pub region: RegionMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
    pub aggregate: AggregateMetrics,
    /// Frames present on one side only (render without GT or vice versa).
    pub missing_frames: Vec<u32>,
    /// Provenance of the run that produced the renders, when known.
    #[serde(default)]
    pub config_hash: Option<String>,
}

/// Metrics of a single frame; `region` may be empty.
pub fn frame_metrics(frame_index: u32, render: &Raster, gt: &Raster, region: &Bitmap) -> Result<FrameMetrics> {
    check_mask(render, region)?;
    let psnr_all = psnr(render, gt, None)?;
    let ssim_all = ssim(render, gt)?;
    let pixels = region.count();
    let sufficient = pixels >= MIN_REGION_PIXELS;
    let (rp, rs) = if sufficient {
        (Some(psnr(render, gt, Some(region))?), Some(ssim_region(render, gt, region)?))
    } else {
        (None, None)
    };
    Ok(FrameMetrics {
        frame_index,
        psnr: psnr_all,
        ssim: ssim_all,
        region: RegionMetrics {
            pixels,
            sufficient,
            psnr: rp,
            ssim: rs,
        },
    })
}

/// Compare renders against clean ground truth, globally and inside the target
/// regions. Frames missing on either side are listed, not fatal; a frame
/// without a region mask is scored with an empty region.
pub fn evaluate_inpainting(
    renders: &BTreeMap<u32, Raster>,
    gt: &BTreeMap<u32, Raster>,
    regions: &BTreeMap<u32, Bitmap>,
) -> Result<EvalReport> {
    let mut missing: Vec<u32> = renders.keys().filter(|k| !gt.contains_key(k)).copied().collect();
    missing.extend(gt.keys().filter(|k| !renders.contains_key(k)));
    missing.sort_unstable();

    let mut frames = Vec::new();
    let (mut se_all, mut n_all) = (0.0, 0usize);
    let (mut se_reg, mut n_reg, mut reg_pixels) = (0.0, 0usize, 0usize);
    let mut ssim_reg_weighted = 0.0;
    for (&f, r) in renders {
        let Some(g) = gt.get(&f) else { continue };
        let region = match regions.get(&f) {
            Some(m) => m.clone(),
            None => Bitmap::new(r.width, r.height),
        };
        let m = frame_metrics(f, r, g, &region)?;
        let (se, n) = squared_error(r, g, None)?;
        se_all += se;
        n_all += n;
        if m.region.sufficient {
            let (se, n) = squared_error(r, g, Some(&region))?;
            se_reg += se;
            n_reg += n;
            reg_pixels += m.region.pixels;
            ssim_reg_weighted += m.region.ssim.unwrap_or(0.0) * m.region.pixels as f64;
        }
        frames.push(m);
    }
    if frames.is_empty() {
        return Err(Error::MissingInput("no frame has both a render and ground truth".into()));
    }
    let region = if reg_pixels > 0 {
        RegionMetrics {
            pixels: reg_pixels,
            sufficient: true,
            psnr: Some(psnr_from(se_reg, n_reg)),
            ssim: Some(ssim_reg_weighted / reg_pixels as f64),
        }
    } else {
        RegionMetrics {
            pixels: frames.iter().map(|m| m.region.pixels).sum(),
            sufficient: false,
            psnr: None,
            ssim: None,
        }
    };
    let aggregate = AggregateMetrics {
        frames: frames.len(),
        psnr: psnr_from(se_all, n_all),
        ssim: frames.iter().map(|m| m.ssim).sum::<f64>() / frames.len() as f64,
        region,
    };
    Ok(EvalReport {
        frames,
        aggregate,
        missing_frames: missing,
        config_hash: None,
    })
}
