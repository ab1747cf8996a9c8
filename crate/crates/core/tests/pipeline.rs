use std::path::Path;

use gspw_core::pipeline::{run_pipeline, PipelineConfig, RunSummary, Stage};
use gspw_core::synth::{generate_road_scene, write_synth, GenSpec};
use gspw_core::{exit_code, Error};

fn small_road(seed: u64) -> GenSpec {
    GenSpec {
        seed,
        road_length: 60.0,
        camera_count: 12,
        image_width: 128,
        image_height: 64,
        focal: 64.0,
        ..GenSpec::default()
    }
}

/// Write a small synthetic scene and a config that points at it.
fn small_run(dir: &Path, seed: u64, extra: &str) -> PipelineConfig {
    let synth = generate_road_scene(&small_road(seed)).unwrap();
    write_synth(&synth, dir.join("data")).unwrap();
    let text = format!(
        "scene = \"data/scene_corrupt.gsp\"\nmasks = \"data/masks\"\nimages = \"data/gt\"\n\
         clean = \"data/clean\"\nregions = \"data/regions\"\nout = \"out\"\n{extra}"
    );
    std::fs::write(dir.join("run.toml"), text).unwrap();
    PipelineConfig::load(dir.join("run.toml"), &[]).unwrap()
}

#[test]
fn defaults_equal_the_constants_table() {
    let c = PipelineConfig::default();
    let table: [(&str, f64, f64); 13] = [
        ("voxel_size (lambda_size = 250 cm)", c.voxel_size, 2.5),
        ("opacity_thresh", c.opacity_thresh, 0.9),
        ("cmp (lambda_CMP)", c.cmp, 0.5),
        ("span_u", c.span_u, 30.0),
        ("span_v", c.span_v, 5.0),
        ("stride (= lambda_size)", c.search_config().stride_for(c.voxel_size), 2.5),
        ("band_px", c.band_px as f64, 10.0),
        ("w_alpha", c.w_alpha, 0.5),
        ("fusion_iters", c.fusion_iters as f64, 50.0),
        ("lambda_ssim", c.lambda_ssim, 0.2),
        ("lambda_depth", c.lambda_depth, 0.2),
        ("lambda_feat", c.lambda_feat, 1.0),
        ("prune_opacity", c.prune_opacity, 0.05),
    ];
    for (name, got, want) in table {
        assert_eq!(got, want, "{name}");
    }
    assert_eq!(c.stride, None, "stride follows the voxel size unless set");
    c.validate().unwrap();
}

#[test]
fn empty_file_gives_defaults() {
    assert_eq!(PipelineConfig::from_toml_str("", &[]).unwrap(), PipelineConfig::default());
}

#[test]
fn hash_is_stable_under_key_reordering() {
    let a = PipelineConfig::from_toml_str("voxel_size = 1.5\nspan_u = 20.0\nseed = 3\n", &[]).unwrap();
    let b = PipelineConfig::from_toml_str("seed = 3\nspan_u = 20.0\nvoxel_size = 1.5\n", &[]).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
    let c = PipelineConfig::from_toml_str("seed = 4\nspan_u = 20.0\nvoxel_size = 1.5\n", &[]).unwrap();
    assert_ne!(a.hash(), c.hash());
    let mut moved = a.clone();
    moved.out = "elsewhere".into();
    assert_eq!(a.hash(), moved.hash());
}

#[test]
fn overrides_replace_file_values() {
    let o = vec![("span_u".to_string(), toml::Value::Float(12.0))];
    let c = PipelineConfig::from_toml_str("span_u = 20.0\nspan_v = 2.0\n", &o).unwrap();
    assert_eq!((c.span_u, c.span_v), (12.0, 2.0));
}

#[test]
fn config_round_trips_through_toml() {
    let mut c = PipelineConfig::default();
    c.stride = Some(1.25);
    c.scene = Some("a/b.gsp".into());
    let back = PipelineConfig::from_toml_str(&c.to_toml_string(), &[]).unwrap();
    assert_eq!(back, c);
}

#[test]
fn bad_configs_are_config_errors() {
    for text in [
        "voxel_size = 0.0",
        "opacity_thresh = 1.5",
        "cmp = -0.1",
        "span_u = -1.0",
        "stride = 0.0",
        "w_alpha = 2.0",
        "fusion_step = 0.0",
        "lambda_ssim = 1.5",
        "prune_opacity = 1.0",
        "no_such_key = 1",
        "voxel_size = \"big\"",
        "this is not toml",
    ] {
        let e = PipelineConfig::from_toml_str(text, &[]).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{text}: {e}");
        assert_eq!(e.exit_code(), exit_code::CONFIG);
    }
}

#[test]
fn error_exit_codes() {
    assert_eq!(Error::NoCandidate.exit_code(), 3);
    assert_eq!(Error::MissingInput("x".into()).exit_code(), 4);
    assert_eq!(Error::Validation("x".into()).exit_code(), 5);
    assert_eq!(Error::InfeasibleSpec("x".into()).exit_code(), 2);
}

#[test]
fn relative_paths_resolve_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "scene = \"s.gsp\"\nout = \"/abs/out\"\n").unwrap();
    let c = PipelineConfig::load(dir.path().join("c.toml"), &[]).unwrap();
    assert_eq!(c.scene.unwrap(), dir.path().join("s.gsp"));
    assert_eq!(c.out, Path::new("/abs/out"));
}

#[test]
fn full_run_writes_every_artifact_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), 5, "");
    let summary = run_pipeline(&cfg).unwrap();
    let out = &cfg.out;
    for f in [
        "config.toml",
        "index.json",
        "targets.json",
        "affinities.json",
        "transplant.json",
        "scene_transplanted.gsp",
        "fusion.json",
        "loss.csv",
        "scene_inpainted.gsp",
        "renders/frame_0000.ppm",
        "report.json",
        "report_baseline.json",
        "run.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let hash = cfg.hash();
    for f in ["index.json", "targets.json", "affinities.json", "transplant.json", "fusion.json", "report.json", "run.json"] {
        let text = std::fs::read_to_string(out.join(f)).unwrap();
        assert!(text.contains(&hash), "{f} lacks the config hash");
    }
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("iteration,loss"));
    assert_eq!(csv.lines().count(), 1 + 1 + cfg.fusion_iters);
    assert!(summary.failure.is_none());
    assert!(summary.region_psnr.unwrap() > summary.baseline_region_psnr.unwrap());

    let mut again = cfg.clone();
    again.out = dir.path().join("out2");
    run_pipeline(&again).unwrap();
    let a = std::fs::read(out.join("scene_inpainted.gsp")).unwrap();
    let b = std::fs::read(again.out.join("scene_inpainted.gsp")).unwrap();
    assert!(a == b, "reruns differ");
}

#[test]
fn span_without_occupied_voxels_fails_in_search_with_no_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), 6, "span_u = 0.0\nspan_v = 0.0\n");
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Search);
    assert_eq!(err.exit_code(), exit_code::NO_CANDIDATE);
    // earlier artifacts are kept, later ones never written
    assert!(cfg.out.join("targets.json").exists());
    assert!(cfg.out.join("affinities.json").exists());
    assert!(!cfg.out.join("scene_inpainted.gsp").exists());
    let summary: RunSummary = serde_json::from_slice(&std::fs::read(cfg.out.join("run.json")).unwrap()).unwrap();
    let failure = summary.failure.unwrap();
    assert_eq!((failure.stage, failure.code), (Stage::Search, 3));
}

#[test]
fn widening_recovers_from_an_empty_span() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), 6, "span_u = 0.0\nspan_v = 0.0\nwiden_retries = 5\nfusion_iters = 2\n");
    run_pipeline(&cfg).unwrap();
}

#[test]
fn missing_inputs_fail_in_load_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "scene = \"nope.gsp\"\nmasks = \"m\"\nimages = \"i\"\n").unwrap();
    let cfg = PipelineConfig::load(dir.path().join("c.toml"), &[]).unwrap();
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Load);
    assert_eq!(err.exit_code(), exit_code::IO);
    assert!(err.to_string().contains("stage load"));
}
