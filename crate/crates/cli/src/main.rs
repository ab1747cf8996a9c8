//! `gspw`: command-line driver for the inpainting pipeline.
//!
//! Every subcommand reads the same flat configuration (`--config FILE`,
//! optional) and lets its flags override file values. Exit codes: 0 ok,
//! 2 configuration error, 3 no candidate, 4 I/O, 5 validation.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use gspw_core::fit::{fit_embeddings, simplified_train};
use gspw_core::pipeline::{
    evaluate_dirs, fuse_transplants, manifold_of, read_json, run_pipeline, search_patch,
    transplant_all, write_json, write_loss_csv, AffinitiesArtifact, PipelineConfig, TargetsArtifact,
    TransplantArtifact,
};
use gspw_core::render::{render, Channels, RenderOptions};
use gspw_core::scene::{
    frame_file_name, load_depth_pgm16, list_frame_files, load_feature_dir, load_image_dir, load_mask_dir,
    load_scene, save_depth_pgm16, save_feature_map, save_image, save_scene,
};
use gspw_core::synth::{generate_road_scene, write_synth, GenSpec, DEPTH_SCALE};
use gspw_core::bev::FeatureCache;
use gspw_core::index::build_index;
use gspw_core::locate::locate;
use gspw_core::{exit_code, Error};
use nalgebra::Vector3;

/// Environment variable capping the worker thread count.
const THREADS_ENV: &str = "GSPW_THREADS";

#[derive(Debug, Parser)]
#[command(name = "gspw", version, about = "Inpaint anchor-based Gaussian road scenes by patch search")]
struct Cli {
    /// Pipeline configuration (flat TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic road scene with masks, images and ground truth.
    BuildSynth(BuildSynthArgs),
    /// Fit per-primitive feature embeddings (or the full composite loss).
    FitFeatures(FitArgs),
    /// Find target anchors and patches from occlusion masks.
    Locate(LocateArgs),
    /// Score source placements for every located patch.
    Search(SearchArgs),
    /// Transplant the best placements and fuse them.
    Inpaint(InpaintArgs),
    /// Render every camera of a scene.
    Render(RenderArgs),
    /// Region-aware PSNR / SSIM of renders against ground truth.
    Eval(EvalArgs),
    /// Run the full pipeline from a configuration.
    Run(RunArgs),
}

#[derive(Debug, Args)]
struct BuildSynthArgs {
    #[arg(long, default_value_t = GenSpec::default().seed)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = GenSpec::default().road_length)]
    road_length: f64,
    /// Texture repeat period along the road, meters.
    #[arg(long, default_value_t = GenSpec::default().period)]
    period: f64,
    /// Hill amplitude, meters.
    #[arg(long, default_value_t = GenSpec::default().hill)]
    hill: f64,
    #[arg(long, default_value_t = GenSpec::default().camera_count)]
    cameras: usize,
    #[arg(long, default_value_t = GenSpec::default().image_width)]
    width: u32,
    #[arg(long, default_value_t = GenSpec::default().image_height)]
    height: u32,
    #[arg(long, default_value_t = GenSpec::default().focal)]
    focal: f64,
    #[arg(long, default_value_t = GenSpec::default().feature_dim)]
    feature_dim: usize,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Directory of `frame_XXXX.fmap` feature maps.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Also fit appearance against these images (composite loss).
    #[arg(long)]
    images: Option<PathBuf>,
    /// Depth maps for the composite loss (16-bit PGM, millimeters).
    #[arg(long, requires = "images")]
    depth: Option<PathBuf>,
    /// Iterations (default 500).
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LocateArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    /// Anchors at or above this opacity are never targets (default 0.9).
    #[arg(long)]
    opacity_thresh: Option<f64>,
    /// Recurrence rate marking an anchor incomplete (default 0.5).
    #[arg(long)]
    cmp: Option<f64>,
    /// Voxel edge length, meters (default 2.5).
    #[arg(long)]
    voxel_size: Option<f64>,
    /// Only use mask frames within this many frames of the selected one.
    #[arg(long)]
    locate_window: Option<u32>,
    /// Frame used to locate holes (default: the one with most mask pixels).
    #[arg(long)]
    ref_frame: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    targets: PathBuf,
    /// Longitudinal search half-extent, meters (default 30).
    #[arg(long)]
    span_u: Option<f64>,
    /// Lateral search half-extent, meters (default 5).
    #[arg(long)]
    span_v: Option<f64>,
    /// Grid step, meters (default: the voxel size).
    #[arg(long)]
    stride: Option<f64>,
    /// Times to double the spans when no candidate is found (default 0).
    #[arg(long)]
    widen: Option<u32>,
    #[arg(long)]
    dump: PathBuf,
}

#[derive(Debug, Args)]
struct InpaintArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    targets: PathBuf,
    #[arg(long)]
    affinity: PathBuf,
    /// Occlusion masks used to build fusion supervision.
    #[arg(long)]
    masks: PathBuf,
    /// Captured images used to build fusion supervision.
    #[arg(long)]
    images: PathBuf,
    /// Fusion iterations (default 50).
    #[arg(long)]
    fusion_iters: Option<usize>,
    /// Fusion step size (default 0.05).
    #[arg(long)]
    step: Option<f64>,
    /// Edge blending band width in pixels (default 10).
    #[arg(long)]
    band_px: Option<u32>,
    /// Edge blending weight (default 0.5).
    #[arg(long)]
    w_alpha: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write depth as 16-bit PGM (millimeters).
    #[arg(long)]
    depth: bool,
    /// Also write alpha as 16-bit PGM (1.0 = 65535).
    #[arg(long)]
    alpha: bool,
    /// Also write feature maps (`.fmap`).
    #[arg(long)]
    features: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    renders: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    regions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Output directory (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed of the generated scene when no input scene is configured.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long)]
    span_u: Option<f64>,
    #[arg(long)]
    span_v: Option<f64>,
    #[arg(long)]
    stride: Option<f64>,
    #[arg(long)]
    fusion_iters: Option<usize>,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Collects `Some` flags as typed overrides of configuration keys.
#[derive(Default)]
struct Overrides(Vec<(String, toml::Value)>);

impl Overrides {
    fn float(&mut self, key: &str, v: Option<f64>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key.into(), toml::Value::Float(v)));
        }
        self
    }

    fn int(&mut self, key: &str, v: Option<u64>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key.into(), toml::Value::Integer(v as i64)));
        }
        self
    }

    fn path(&mut self, key: &str, v: Option<&Path>) -> &mut Self {
        if let Some(v) = v {
            // flag paths are relative to the working directory, not the file
            let v = std::path::absolute(v).unwrap_or_else(|_| v.to_path_buf());
            self.0.push((key.into(), toml::Value::String(v.display().to_string())));
        }
        self
    }
}

/// Configuration file (or defaults) with the flag overrides applied.
/// Relative paths in the file resolve against its directory.
fn effective_config(file: Option<&Path>, overrides: &Overrides) -> CliResult<PipelineConfig> {
    Ok(match file {
        Some(p) => PipelineConfig::load(p, &overrides.0)?,
        None => PipelineConfig::from_toml_str("", &overrides.0)?,
    })
}

fn command_overrides(cmd: &Command) -> Overrides {
    let mut o = Overrides::default();
    match cmd {
        Command::BuildSynth(_) | Command::Render(_) | Command::Eval(_) => {}
        Command::FitFeatures(a) => {
            o.int("fit_iters", a.iters.map(|v| v as u64));
        }
        Command::Locate(a) => {
            o.float("opacity_thresh", a.opacity_thresh)
                .float("cmp", a.cmp)
                .float("voxel_size", a.voxel_size)
                .int("locate_window", a.locate_window.map(u64::from))
                .int("ref_frame", a.ref_frame.map(u64::from));
        }
        Command::Search(a) => {
            o.float("span_u", a.span_u)
                .float("span_v", a.span_v)
                .float("stride", a.stride)
                .int("widen_retries", a.widen.map(u64::from));
        }
        Command::Inpaint(a) => {
            o.int("fusion_iters", a.fusion_iters.map(|v| v as u64))
                .float("fusion_step", a.step)
                .int("band_px", a.band_px.map(u64::from))
                .float("w_alpha", a.w_alpha);
        }
        Command::Run(a) => {
            o.path("out", a.out.as_deref())
                .int("seed", a.seed)
                .float("voxel_size", a.voxel_size)
                .float("span_u", a.span_u)
                .float("span_v", a.span_v)
                .float("stride", a.stride)
                .int("fusion_iters", a.fusion_iters.map(|v| v as u64));
        }
    }
    o
}

fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure {
                code: exit_code::CONFIG,
                message: format!("{THREADS_ENV} must be a positive integer, got {v:?}"),
            }),
        },
    }
}

/// Duplicates log output to stderr and a run log file.
struct Tee(Mutex<Option<File>>);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        if let Some(f) = self.0.lock().expect("log file lock").as_mut() {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stderr().flush()
    }
}

fn init_logging(log_file: Option<&Path>) {
    let mut b = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if let Some(p) = log_file {
        if let Some(dir) = p.parent() {
            let _ = fs::create_dir_all(dir);
        }
        if let Ok(f) = File::create(p) {
            b.target(env_logger::Target::Pipe(Box::new(Tee(Mutex::new(Some(f))))));
        }
    }
    let _ = b.try_init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = command_overrides(&cli.command);
    let outcome = effective_config(cli.config.as_deref(), &overrides).and_then(|cfg| {
        let log_file = matches!(cli.command, Command::Run(_)).then(|| cfg.out.join("run.log"));
        init_logging(log_file.as_deref());
        log::info!("config hash {}", cfg.hash());
        let threads = thread_cap()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.unwrap_or(0))
            .build()
            .map_err(|e| Failure {
                code: exit_code::CONFIG,
                message: format!("thread pool: {e}"),
            })?;
        pool.install(|| execute(&cli.command, &cfg))
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{}", f.message);
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}

fn execute(cmd: &Command, cfg: &PipelineConfig) -> CliResult {
    match cmd {
        Command::BuildSynth(a) => build_synth(a),
        Command::FitFeatures(a) => fit_features(a, cfg),
        Command::Locate(a) => run_locate(a, cfg),
        Command::Search(a) => run_search(a, cfg),
        Command::Inpaint(a) => run_inpaint(a, cfg),
        Command::Render(a) => run_render(a),
        Command::Eval(a) => run_eval(a, cfg),
        Command::Run(_) => run_pipeline(cfg).map(|_| ()).map_err(|e| Failure {
            code: e.exit_code(),
            message: e.to_string(),
        }),
    }
}

fn build_synth(a: &BuildSynthArgs) -> CliResult {
    let spec = GenSpec {
        seed: a.seed,
        road_length: a.road_length,
        period: a.period,
        hill: a.hill,
        camera_count: a.cameras,
        image_width: a.width,
        image_height: a.height,
        focal: a.focal,
        feature_dim: a.feature_dim,
        ..GenSpec::default()
    };
    let s = generate_road_scene(&spec)?;
    write_synth(&s, &a.out)?;
    log::info!(
        "wrote synthetic scene (seed {}, {} primitives, {} frames) to {}",
        a.seed,
        s.corrupt.primitives.len(),
        s.corrupt.cameras.len(),
        a.out.display()
    );
    Ok(())
}

fn write_trace(trace: &[f64], path: &Path) -> CliResult {
    // the trace's first entry is the loss before any update
    let (first, rest) = trace.split_first().map_or((0.0, &[][..]), |(f, r)| (*f, r));
    Ok(write_loss_csv(first, rest, path)?)
}

fn fit_features(a: &FitArgs, cfg: &PipelineConfig) -> CliResult {
    let scene = load_scene(&a.scene)?;
    let maps = load_feature_dir(&a.features)?;
    let masks = match &a.masks {
        Some(d) => load_mask_dir(d)?,
        None => Vec::new(),
    };
    let train = cfg.train_config();
    let result = match &a.images {
        None => fit_embeddings(&scene, &maps, &masks, &train)?,
        Some(dir) => {
            let images: BTreeMap<u32, _> = load_image_dir(dir)?.into_iter().collect();
            let depths = match &a.depth {
                Some(d) => Some(
                    list_frame_files(d, "pgm")?
                        .into_iter()
                        .map(|(i, p)| load_depth_pgm16(p, DEPTH_SCALE).map(|r| (i, r)))
                        .collect::<Result<BTreeMap<_, _>, _>>()?,
                ),
                None => None,
            };
            simplified_train(&scene, &images, depths.as_ref(), &maps, &masks, &train)?
        }
    };
    save_scene(&result.scene, &a.out)?;
    if let Some(t) = &a.trace {
        write_trace(&result.trace, t)?;
    }
    log::info!("wrote {} ({} primitives pruned)", a.out.display(), result.pruned.len());
    Ok(())
}

fn run_locate(a: &LocateArgs, cfg: &PipelineConfig) -> CliResult {
    let scene = load_scene(&a.scene)?;
    let masks = load_mask_dir(&a.masks)?;
    let manifold = manifold_of(&scene)?;
    let index = build_index(&scene, cfg.voxel_size, None)?;
    let located = locate(&scene, &masks, &cfg.locate_config(), &index, &manifold)?;
    write_json(
        &TargetsArtifact {
            config_hash: Some(cfg.hash()),
            locate: located,
        },
        &a.out,
    )?;
    Ok(())
}

fn run_search(a: &SearchArgs, cfg: &PipelineConfig) -> CliResult {
    let scene = load_scene(&a.scene)?;
    let targets: TargetsArtifact = read_json(&a.targets)?;
    let located = &targets.locate;
    let manifold = manifold_of(&scene)?;
    let index = build_index(&scene, located.voxel_size, Some(Vector3::from(located.origin)))?;
    let removed = scene.without(&located.targets);
    let cache = FeatureCache::new(&removed);
    let mut patches = Vec::new();
    let mut failure = None;
    for p in 0..located.patches.len() {
        match search_patch(p, located, &index, &manifold, &cfg.search_config(), cfg.widen_retries, &cache) {
            Ok(s) => patches.push(s),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    write_json(
        &AffinitiesArtifact {
            config_hash: Some(cfg.hash()),
            patches,
        },
        &a.dump,
    )?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn run_inpaint(a: &InpaintArgs, cfg: &PipelineConfig) -> CliResult {
    let scene = load_scene(&a.scene)?;
    let targets: TargetsArtifact = read_json(&a.targets)?;
    let searches: AffinitiesArtifact = read_json(&a.affinity)?;
    let located = &targets.locate;
    let index = build_index(&scene, located.voxel_size, Some(Vector3::from(located.origin)))?;
    let masks = load_mask_dir(&a.masks)?;
    let images: BTreeMap<u32, _> = load_image_dir(&a.images)?.into_iter().collect();
    let (transplanted, mut records) = transplant_all(&scene, &index, located, &searches.patches)?;
    let hash = Some(cfg.hash());
    records.iter_mut().for_each(|r| r.config_hash = hash.clone());
    let (fusion, reference, _) = fuse_transplants(&transplanted, &records, &masks, &images, &cfg.fusion_config())?;
    save_scene(&fusion.scene, &a.out)?;
    let record_path = a.out.with_extension("transplant.json");
    write_json(
        &TransplantArtifact {
            config_hash: hash,
            records,
        },
        &record_path,
    )?;
    if let Some(t) = &a.trace {
        write_loss_csv(fusion.initial_loss, &fusion.trace, t)?;
    }
    log::info!("wrote {} (reference frame {reference:?})", a.out.display());
    Ok(())
}

fn run_render(a: &RenderArgs) -> CliResult {
    let scene = load_scene(&a.scene)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let channels = Channels {
        rgb: true,
        depth: a.depth,
        feature: a.features,
    };
    for cam in &scene.cameras {
        let out = render(&scene, cam, &RenderOptions::new(channels));
        let f = cam.frame_index;
        save_image(out.rgb.as_ref().expect("rgb requested"), a.out.join(frame_file_name(f, "ppm")))?;
        if let Some(d) = &out.depth {
            save_depth_pgm16(d, DEPTH_SCALE, a.out.join(format!("depth_{}", frame_file_name(f, "pgm"))))?;
        }
        if a.alpha {
            save_depth_pgm16(&out.alpha, 65535.0, a.out.join(format!("alpha_{}", frame_file_name(f, "pgm"))))?;
        }
        if let Some(fm) = &out.feature {
            save_feature_map(fm, a.out.join(frame_file_name(f, "fmap")))?;
        }
    }
    log::info!("rendered {} frame(s) into {}", scene.cameras.len(), a.out.display());
    Ok(())
}

fn run_eval(a: &EvalArgs, cfg: &PipelineConfig) -> CliResult {
    let mut report = evaluate_dirs(&a.renders, &a.gt, a.regions.as_deref())?;
    report.config_hash = Some(cfg.hash());
    if !report.missing_frames.is_empty() {
        log::warn!("frames missing on one side: {:?}", report.missing_frames);
    }
    write_json(&report, &a.out)?;
    log::info!(
        "PSNR {:.2} dB, SSIM {:.4}; region PSNR {:?}",
        report.aggregate.psnr,
        report.aggregate.ssim,
        report.aggregate.region.psnr
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("gspw").chain(args.iter().copied())).unwrap()
    }

    fn config_for(args: &[&str]) -> PipelineConfig {
        let cli = parse(args);
        effective_config(cli.config.as_deref(), &command_overrides(&cli.command)).unwrap()
    }

    /// Constants the defaults must reproduce.
    const CONSTANTS: [(&str, f64); 14] = [
        ("voxel_size", 2.5),
        ("opacity_thresh", 0.9),
        ("cmp", 0.5),
        ("span_u", 30.0),
        ("span_v", 5.0),
        ("stride", 2.5),
        ("band_px", 10.0),
        ("w_alpha", 0.5),
        ("fusion_iters", 50.0),
        ("fusion_step", 0.05),
        ("lambda_ssim", 0.2),
        ("lambda_depth", 0.2),
        ("lambda_feat", 1.0),
        ("prune_opacity", 0.05),
    ];

    fn value(c: &PipelineConfig, key: &str) -> f64 {
        match key {
            "voxel_size" => c.voxel_size,
            "opacity_thresh" => c.opacity_thresh,
            "cmp" => c.cmp,
            "span_u" => c.span_u,
            "span_v" => c.span_v,
            "stride" => c.search_config().stride_for(c.voxel_size),
            "band_px" => c.band_px as f64,
            "w_alpha" => c.w_alpha,
            "fusion_iters" => c.fusion_iters as f64,
            "fusion_step" => c.fusion_step,
            "lambda_ssim" => c.lambda_ssim,
            "lambda_depth" => c.lambda_depth,
            "lambda_feat" => c.lambda_feat,
            "prune_opacity" => c.prune_opacity,
            _ => unreachable!("{key}"),
        }
    }

    #[test]
    fn cli_defaults_equal_the_constants_table() {
        let invocations: [&[&str]; 5] = [
            &["run"],
            &["locate", "--scene", "s", "--masks", "m", "--out", "o"],
            &["search", "--scene", "s", "--targets", "t", "--dump", "d"],
            &["inpaint", "--scene", "s", "--targets", "t", "--affinity", "a", "--masks", "m", "--images", "i", "--out", "o"],
            &["fit-features", "--scene", "s", "--features", "f", "--out", "o"],
        ];
        for args in invocations {
            let c = config_for(args);
            for (key, want) in CONSTANTS {
                assert_eq!(value(&c, key), want, "{key} via {args:?}");
            }
        }
        assert_eq!(config_for(&["fit-features", "--scene", "s", "--features", "f", "--out", "o"]).fit_iters, 500);
        let Command::BuildSynth(b) = parse(&["build-synth", "--out", "d"]).command else { unreachable!() };
        assert_eq!((b.seed, b.road_length, b.period, b.hill), (0, 100.0, 10.0, 0.0));
        assert_eq!((b.cameras, b.width, b.height), (30, 256, 128));
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "span_u = 12.0\nspan_v = 2.0\n").unwrap();
        let c = config_for(&["--config", p.to_str().unwrap(), "search", "--scene", "s", "--targets", "t", "--dump", "d", "--span-u", "7"]);
        assert_eq!((c.span_u, c.span_v), (7.0, 2.0));
    }

    #[test]
    fn invalid_flag_values_are_config_errors() {
        let cli = parse(&["locate", "--scene", "s", "--masks", "m", "--out", "o", "--cmp", "1.5"]);
        let e = effective_config(None, &command_overrides(&cli.command)).unwrap_err();
        assert_eq!(e.code, exit_code::CONFIG);
    }
}
