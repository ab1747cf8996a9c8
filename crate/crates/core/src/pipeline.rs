//! End-to-end driver: one flat configuration, staged execution and on-disk
//! artifacts.
//!
//! Stages run in order load → index → locate → search → transplant → fuse →
//! render → eval. Each stage writes its artifact into the output directory
//! before the next one starts, so a failure leaves everything produced so far
//! in place. Every JSON artifact carries the configuration hash.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bev::{fit_ground_manifold, select_best, AffinityRecord, FeatureCache, GroundManifold, SearchConfig};
use crate::eval::{evaluate_inpainting, EvalReport};
use crate::fit::TrainConfig;
use crate::fuse::{build_supervision, fuse, transplant, FusionConfig, FusionResult, TransplantRecord};
use crate::index::{build_index, VoxelIndex};
use crate::locate::{locate, LocateConfig, LocateResult};
use crate::raster::{Bitmap, Raster};
use crate::render::{render, Channels, RenderOptions};
use crate::scene::{
    frame_file_name, list_frame_files, load_image_dir, load_mask, load_mask_dir, load_scene, save_image,
    save_scene, FrameMask, PrimitiveId, Scene,
};
use crate::synth::{generate_road_scene, write_synth, GenSpec};
use crate::{Error, Result};

/// Every tunable of the pipeline in one flat table. Relative paths are
/// resolved against the directory of the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed of the synthetic scene generated when no `scene` is given.
    pub seed: u64,
    /// Voxel edge length of the patch index, meters.
    pub voxel_size: f64,
    pub opacity_thresh: f64,
    pub cmp: f64,
    pub locate_window: Option<u32>,
    pub ref_frame: Option<u32>,
    pub span_u: f64,
    pub span_v: f64,
    /// Search grid step; absent = `voxel_size`.
    pub stride: Option<f64>,
    /// Times the search spans are doubled after finding no candidate.
    pub widen_retries: u32,
    pub band_px: u32,
    pub w_alpha: f64,
    pub fusion_iters: usize,
    pub fusion_step: f64,
    pub lambda_ssim: f64,
    pub lambda_depth: f64,
    pub lambda_feat: f64,
    pub prune_opacity: f64,
    pub fit_iters: usize,
    /// Input scene (`.gsp`); absent = generate one from `seed`.
    pub scene: Option<PathBuf>,
    /// Occlusion masks, `frame_XXXX.pgm`.
    pub masks: Option<PathBuf>,
    /// Captured images, `frame_XXXX.ppm`.
    pub images: Option<PathBuf>,
    /// Clean ground truth for evaluation (optional).
    pub clean: Option<PathBuf>,
    /// Target-region masks for evaluation (optional).
    pub regions: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let locate = LocateConfig::default();
        let search = SearchConfig::default();
        let fusion = FusionConfig::default();
        let train = TrainConfig::default();
        PipelineConfig {
            seed: 0,
            voxel_size: 2.5,
            opacity_thresh: locate.opacity_thresh,
            cmp: locate.cmp,
            locate_window: None,
            ref_frame: None,
            span_u: search.span_u,
            span_v: search.span_v,
            stride: search.stride,
            widen_retries: 0,
            band_px: fusion.band_px,
            w_alpha: fusion.w_alpha,
            fusion_iters: fusion.iters,
            fusion_step: fusion.step,
            lambda_ssim: train.lambda_ssim,
            lambda_depth: train.lambda_depth,
            lambda_feat: train.lambda_feat,
            prune_opacity: train.prune_opacity,
            fit_iters: 500,
            scene: None,
            masks: None,
            images: None,
            clean: None,
            regions: None,
            out: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    /// Parse a TOML table, with `overrides` (already typed TOML values)
    /// replacing file keys. Unknown keys are rejected.
    pub fn from_toml_str(text: &str, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        let cfg: PipelineConfig = table.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a configuration file and resolve its relative paths against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml_str(&text, overrides)?;
        Ok(cfg.resolved(path.parent().unwrap_or(Path::new("."))))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copy with every relative path joined onto `base`.
    pub fn resolved(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.scene, &mut self.masks, &mut self.images, &mut self.clean, &mut self.regions]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.out);
        self
    }

    pub fn locate_config(&self) -> LocateConfig {
        LocateConfig {
            opacity_thresh: self.opacity_thresh,
            cmp: self.cmp,
            window: self.locate_window,
            ref_frame: self.ref_frame,
            ..LocateConfig::default()
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            span_u: self.span_u,
            span_v: self.span_v,
            stride: self.stride,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            iters: self.fusion_iters,
            step: self.fusion_step,
            band_px: self.band_px,
            w_alpha: self.w_alpha,
            ..FusionConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda_ssim: self.lambda_ssim,
            lambda_depth: self.lambda_depth,
            lambda_feat: self.lambda_feat,
            iters: self.fit_iters,
            prune_opacity: self.prune_opacity,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::Config(format!("voxel_size must be positive, got {}", self.voxel_size)));
        }
        self.locate_config().validate()?;
        self.search_config().validate()?;
        self.fusion_config().validate()?;
        self.train_config().validate()
    }

    /// SHA-256 of the canonical JSON form (fields in declaration order, so
    /// independent of key order in the file). `out` is excluded: the same
    /// run written to two places has one hash.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Load,
    Index,
    Locate,
    Search,
    Transplant,
    Fuse,
    Render,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().expect("stage is a string"))
    }
}

/// A failed stage and its cause.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        self.error.exit_code()
    }
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub config_hash: Option<String>,
    pub voxel_size: f64,
    pub origin: [f64; 3],
    pub occupied_voxels: usize,
    pub anchors: usize,
}

/// `targets.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetsArtifact {
    pub config_hash: Option<String>,
    pub locate: LocateResult,
}

/// Search outcome of one target patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSearch {
    pub patch: usize,
    pub span_u: f64,
    pub span_v: f64,
    pub best: AffinityRecord,
    /// Every scored placement, in enumeration order.
    pub scored: Vec<AffinityRecord>,
}

/// `affinities.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinitiesArtifact {
    pub config_hash: Option<String>,
    pub patches: Vec<PatchSearch>,
}

/// `transplant.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransplantArtifact {
    pub config_hash: Option<String>,
    pub records: Vec<TransplantRecord>,
}

/// `fusion.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSummary {
    pub config_hash: Option<String>,
    pub reference_frame: Option<u32>,
    pub supervised_frames: Vec<u32>,
    pub trainable: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub accepted: usize,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(value).expect("artifact serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        offset: e.column() as u64,
        message: format!("{}: {e}", path.display()),
    })
}

/// `iteration,loss` rows; row 0 is the loss before the first update.
pub fn write_loss_csv(initial: f64, trace: &[f64], path: &Path) -> Result<()> {
    let mut s = String::from("iteration,loss\n");
    s.push_str(&format!("0,{initial}\n"));
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// The scene's stored manifold, or one fitted to its trajectory.
pub fn manifold_of(scene: &Scene) -> Result<GroundManifold> {
    match &scene.manifold {
        Some(m) => Ok(m.clone()),
        None => fit_ground_manifold(scene),
    }
}

/// Search one patch, doubling the spans up to `retries` times while no
/// candidate is scoreable.
pub fn search_patch(
    patch_id: usize,
    located: &LocateResult,
    index: &VoxelIndex,
    manifold: &GroundManifold,
    cfg: &SearchConfig,
    retries: u32,
    cache: &FeatureCache,
) -> Result<PatchSearch> {
    let mut cfg = cfg.clone();
    // the stride stays fixed while the spans grow
    cfg.stride = Some(cfg.stride_for(index.voxel_size));
    let patch = &located.patches[patch_id];
    for attempt in 0..=retries {
        match select_best(patch_id, patch, index, manifold, &cfg, &located.excluded, cache) {
            Ok((best, scored)) => {
                return Ok(PatchSearch {
                    patch: patch_id,
                    span_u: cfg.span_u,
                    span_v: cfg.span_v,
                    best,
                    scored,
                })
            }
            Err(Error::NoCandidate) if attempt < retries => {
                cfg.span_u = (cfg.span_u * 2.0).max(cfg.stride_for(index.voxel_size));
                cfg.span_v *= 2.0;
                log::warn!("patch {patch_id}: no candidate, widening to {} x {} m", cfg.span_u, cfg.span_v);
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::NoCandidate)
}

/// Everything the locate..fuse stages produce.
#[derive(Debug, Clone)]
pub struct Inpainting {
    pub located: LocateResult,
    pub searches: Vec<PatchSearch>,
    pub records: Vec<TransplantRecord>,
    pub transplanted: Scene,
    pub reference_frame: Option<u32>,
    pub supervised_frames: Vec<u32>,
    pub fusion: FusionResult,
}

impl Inpainting {
    pub fn scene(&self) -> &Scene {
        &self.fusion.scene
    }
}

/// Run index → locate → search → transplant → fuse on in-memory inputs,
/// writing each stage's artifact into `out` when given.
pub fn inpaint(
    scene: &Scene,
    masks: &[FrameMask],
    images: &BTreeMap<u32, Raster>,
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> std::result::Result<Inpainting, StageError> {
    cfg.validate().at(Stage::Load)?;
    let hash = Some(cfg.hash());
    let emit = |stage: Stage, name: &str, f: &dyn Fn(&Path) -> Result<()>| -> std::result::Result<(), StageError> {
        match out {
            Some(dir) => f(&dir.join(name)).at(stage),
            None => Ok(()),
        }
    };

    let manifold = manifold_of(scene).at(Stage::Index)?;
    let index = build_index(scene, cfg.voxel_size, None).at(Stage::Index)?;
    let summary = IndexSummary {
        config_hash: hash.clone(),
        voxel_size: index.voxel_size,
        origin: [index.origin.x, index.origin.y, index.origin.z],
        occupied_voxels: index.occupied_count(),
        anchors: index.anchor_count(),
    };
    emit(Stage::Index, "index.json", &|p| write_json(&summary, p))?;

    let located = locate(scene, masks, &cfg.locate_config(), &index, &manifold).at(Stage::Locate)?;
    let artifact = TargetsArtifact {
        config_hash: hash.clone(),
        locate: located.clone(),
    };
    emit(Stage::Locate, "targets.json", &|p| write_json(&artifact, p))?;

    let removed = scene.without(&located.targets);
    let cache = FeatureCache::new(&removed);
    let mut searches = Vec::new();
    for patch_id in 0..located.patches.len() {
        let found = search_patch(patch_id, &located, &index, &manifold, &cfg.search_config(), cfg.widen_retries, &cache);
        match found {
            Ok(s) => searches.push(s),
            Err(e) => {
                // keep what was scored so far for inspection
                let partial = AffinitiesArtifact {
                    config_hash: hash.clone(),
                    patches: searches.clone(),
                };
                emit(Stage::Search, "affinities.json", &|p| write_json(&partial, p))?;
                return Err(StageError {
                    stage: Stage::Search,
                    error: e,
                });
            }
        }
    }
    let artifact = AffinitiesArtifact {
        config_hash: hash.clone(),
        patches: searches.clone(),
    };
    emit(Stage::Search, "affinities.json", &|p| write_json(&artifact, p))?;

    let (transplanted, records) = transplant_all(scene, &index, &located, &searches).at(Stage::Transplant)?;
    let mut records = records;
    records.iter_mut().for_each(|r| r.config_hash = hash.clone());
    let artifact = TransplantArtifact {
        config_hash: hash.clone(),
        records: records.clone(),
    };
    emit(Stage::Transplant, "transplant.json", &|p| write_json(&artifact, p))?;
    emit(Stage::Transplant, "scene_transplanted.gsp", &|p| save_scene(&transplanted, p))?;

    let (fusion, reference_frame, supervised_frames) =
        fuse_transplants(&transplanted, &records, masks, images, &cfg.fusion_config()).at(Stage::Fuse)?;
    let summary = FusionSummary {
        config_hash: hash.clone(),
        reference_frame,
        supervised_frames: supervised_frames.clone(),
        trainable: records.iter().map(|r| r.live_ids().len()).sum(),
        initial_loss: fusion.initial_loss,
        final_loss: fusion.trace.last().copied().unwrap_or(fusion.initial_loss),
        accepted: fusion.accepted,
    };
    emit(Stage::Fuse, "fusion.json", &|p| write_json(&summary, p))?;
    emit(Stage::Fuse, "loss.csv", &|p| write_loss_csv(fusion.initial_loss, &fusion.trace, p))?;
    emit(Stage::Fuse, "scene_inpainted.gsp", &|p| save_scene(&fusion.scene, p))?;

    Ok(Inpainting {
        located,
        searches,
        records,
        transplanted,
        reference_frame,
        supervised_frames,
        fusion,
    })
}

/// Transplant the best placement of every patch, in patch order.
pub fn transplant_all(
    scene: &Scene,
    index: &VoxelIndex,
    located: &LocateResult,
    searches: &[PatchSearch],
) -> Result<(Scene, Vec<TransplantRecord>)> {
    let mut current = scene.clone();
    let mut records = Vec::new();
    for s in searches {
        let patch = located
            .patches
            .get(s.patch)
            .ok_or_else(|| Error::Validation(format!("search refers to unknown patch {}", s.patch)))?;
        let (next, rec) = transplant(&current, index, s.patch, patch, &s.best.placement, &located.targets)?;
        current = next;
        records.push(rec);
    }
    Ok((current, records))
}

/// Fuse the live copies of all transplants at once. Returns the result, the
/// reference frame and the supervised frames.
pub fn fuse_transplants(
    scene: &Scene,
    records: &[TransplantRecord],
    masks: &[FrameMask],
    images: &BTreeMap<u32, Raster>,
    cfg: &FusionConfig,
) -> Result<(FusionResult, Option<u32>, Vec<u32>)> {
    let Some(first) = records.first() else {
        return Ok((fuse(scene, &[], &[], cfg)?, None, Vec::new()));
    };
    // supervision only looks at the live copies, so one merged record
    // covers every patch
    let mut merged = first.clone();
    for r in &records[1..] {
        merged.new_ids.extend(&r.new_ids);
        merged.source_ids.extend(&r.source_ids);
        merged.zeroed_ids.extend(&r.zeroed_ids);
        merged.removed_ids.extend(&r.removed_ids);
        merged.target_voxels.extend(&r.target_voxels);
    }
    let (supervision, reference) = build_supervision(scene, &merged, masks, images, cfg)?;
    let frames = supervision.iter().map(|s| s.frame_index).collect();
    let live: Vec<PrimitiveId> = merged.live_ids();
    Ok((fuse(scene, &live, &supervision, cfg)?, reference, frames))
}

/// RGB renders of every camera, by frame index.
pub fn render_all(scene: &Scene) -> BTreeMap<u32, Raster> {
    use rayon::prelude::*;
    scene
        .cameras
        .par_iter()
        .map(|c| (c.frame_index, render(scene, c, &RenderOptions::new(Channels::RGB)).rgb.expect("rgb requested")))
        .collect()
}

/// Write renders as `frame_XXXX.ppm` into `dir`.
pub fn save_renders(renders: &BTreeMap<u32, Raster>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (f, img) in renders {
        save_image(img, dir.join(frame_file_name(*f, "ppm")))?;
    }
    Ok(())
}

/// Load `frame_XXXX.pgm` region masks as bitmaps by frame index.
pub fn load_region_dir(dir: &Path) -> Result<BTreeMap<u32, Bitmap>> {
    list_frame_files(dir, "pgm")?
        .into_iter()
        .map(|(i, p)| load_mask(p, i).map(|m| (i, m.mask)))
        .collect()
}

/// Evaluate the renders in `renders` against `clean`, restricted to
/// `regions` when given.
pub fn evaluate_dirs(renders: &Path, clean: &Path, regions: Option<&Path>) -> Result<EvalReport> {
    let r: BTreeMap<u32, Raster> = load_image_dir(renders)?.into_iter().collect();
    let g: BTreeMap<u32, Raster> = load_image_dir(clean)?.into_iter().collect();
    let m = match regions {
        Some(d) => load_region_dir(d)?,
        None => BTreeMap::new(),
    };
    evaluate_inpainting(&r, &g, &m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub code: i32,
    pub message: String,
}

/// `run.json`: what ran, how long it took and how it ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub timings: Vec<StageTiming>,
    pub failure: Option<StageFailure>,
    pub region_psnr: Option<f64>,
    pub baseline_region_psnr: Option<f64>,
}

struct Inputs {
    scene: Scene,
    masks: Vec<FrameMask>,
    images: BTreeMap<u32, Raster>,
    clean: Option<PathBuf>,
    regions: Option<PathBuf>,
}

fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs> {
    let mut cfg = cfg.clone();
    if cfg.scene.is_none() {
        let dir = cfg.out.join("input");
        log::info!("no input scene configured: generating synthetic scene (seed {}) into {}", cfg.seed, dir.display());
        let synth = generate_road_scene(&GenSpec {
            seed: cfg.seed,
            ..GenSpec::default()
        })?;
        write_synth(&synth, &dir)?;
        cfg.scene = Some(dir.join("scene_corrupt.gsp"));
        cfg.masks.get_or_insert(dir.join("masks"));
        cfg.images.get_or_insert(dir.join("gt"));
        cfg.clean.get_or_insert(dir.join("clean"));
        cfg.regions.get_or_insert(dir.join("regions"));
    }
    let missing = |what: &str| Error::MissingInput(format!("config sets `scene` but no `{what}` directory"));
    let scene = load_scene(cfg.scene.as_ref().expect("set above"))?;
    let masks = load_mask_dir(cfg.masks.as_ref().ok_or_else(|| missing("masks"))?)?;
    let images = load_image_dir(cfg.images.as_ref().ok_or_else(|| missing("images"))?)?.into_iter().collect();
    for p in [&cfg.clean, &cfg.regions].into_iter().flatten() {
        if !p.is_dir() {
            return Err(Error::MissingInput(format!("{} is not a directory", p.display())));
        }
    }
    Ok(Inputs {
        scene,
        masks,
        images,
        clean: cfg.clean,
        regions: cfg.regions,
    })
}

/// Run every stage with artifacts in `cfg.out`. `run.json` is written on
/// success and on failure.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<RunSummary, StageError> {
    let out = cfg.out.clone();
    let hash = cfg.hash();
    let mut summary = RunSummary {
        config_hash: hash.clone(),
        timings: Vec::new(),
        failure: None,
        region_psnr: None,
        baseline_region_psnr: None,
    };
    let result = run_stages(cfg, &mut summary);
    if let Err(e) = &result {
        summary.failure = Some(StageFailure {
            stage: e.stage,
            code: e.exit_code(),
            message: e.error.to_string(),
        });
    }
    if out.is_dir() {
        write_json(&summary, &out.join("run.json")).at(result.as_ref().err().map_or(Stage::Eval, |e| e.stage))?;
    }
    result.map(|()| summary)
}

fn run_stages(cfg: &PipelineConfig, summary: &mut RunSummary) -> std::result::Result<(), StageError> {
    let out = cfg.out.as_path();
    let hash = summary.config_hash.clone();
    log::info!("config hash {hash}");
    cfg.validate().at(Stage::Load)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e)).at(Stage::Load)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string())
        .map_err(|e| Error::io(out.join("config.toml"), e))
        .at(Stage::Load)?;

    let t = Instant::now();
    let inputs = load_inputs(cfg).at(Stage::Load)?;
    summary.timings.push(StageTiming {
        stage: Stage::Load,
        seconds: t.elapsed().as_secs_f64(),
    });

    let t = Instant::now();
    let result = inpaint(&inputs.scene, &inputs.masks, &inputs.images, cfg, Some(out))?;
    summary.timings.push(StageTiming {
        stage: Stage::Fuse,
        seconds: t.elapsed().as_secs_f64(),
    });

    let t = Instant::now();
    let renders_dir = out.join("renders");
    save_renders(&render_all(result.scene()), &renders_dir).at(Stage::Render)?;
    summary.timings.push(StageTiming {
        stage: Stage::Render,
        seconds: t.elapsed().as_secs_f64(),
    });

    let t = Instant::now();
    if let Some(clean) = &inputs.clean {
        let regions = inputs.regions.as_deref();
        let mut report = evaluate_dirs(&renders_dir, clean, regions).at(Stage::Eval)?;
        report.config_hash = Some(hash.clone());
        write_json(&report, &out.join("report.json")).at(Stage::Eval)?;
        summary.region_psnr = report.aggregate.region.psnr;

        let baseline_dir = out.join("renders_input");
        save_renders(&render_all(&inputs.scene), &baseline_dir).at(Stage::Eval)?;
        let mut baseline = evaluate_dirs(&baseline_dir, clean, regions).at(Stage::Eval)?;
        baseline.config_hash = Some(hash);
        write_json(&baseline, &out.join("report_baseline.json")).at(Stage::Eval)?;
        summary.baseline_region_psnr = baseline.aggregate.region.psnr;
        log::info!(
            "region PSNR {:?} dB (input scene {:?} dB)",
            summary.region_psnr,
            summary.baseline_region_psnr
        );
    } else {
        log::info!("no clean ground truth configured; skipping evaluation");
    }
    summary.timings.push(StageTiming {
        stage: Stage::Eval,
        seconds: t.elapsed().as_secs_f64(),
    });
    Ok(())
}
