use std::path::Path;
use std::process::Command;

fn gspw(dir: &Path, args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_gspw"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    if !out.status.success() {
        eprintln!("gspw {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().expect("exited normally")
}

fn small_synth(dir: &Path, seed: &str) {
    let code = gspw(
        dir,
        &[
            "build-synth", "--seed", seed, "--out", "data", "--road-length", "60", "--cameras", "12", "--width", "128",
            "--height", "64", "--focal", "64",
        ],
    );
    assert_eq!(code, 0);
}

#[test]
fn stepwise_subcommands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_synth(d, "6");
    assert!(d.join("data/scene_corrupt.gsp").exists());
    assert_eq!(gspw(d, &["locate", "--scene", "data/scene_corrupt.gsp", "--masks", "data/masks", "--out", "targets.json"]), 0);
    assert_eq!(
        gspw(d, &["search", "--scene", "data/scene_corrupt.gsp", "--targets", "targets.json", "--dump", "affinities.json"]),
        0
    );
    assert_eq!(
        gspw(
            d,
            &[
                "inpaint", "--scene", "data/scene_corrupt.gsp", "--targets", "targets.json", "--affinity",
                "affinities.json", "--masks", "data/masks", "--images", "data/gt", "--fusion-iters", "10", "--out",
                "inpainted.gsp", "--trace", "loss.csv",
            ]
        ),
        0
    );
    let csv = std::fs::read_to_string(d.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 12);
    assert_eq!(gspw(d, &["render", "--scene", "inpainted.gsp", "--out", "renders", "--depth", "--alpha"]), 0);
    assert!(d.join("renders/frame_0000.ppm").exists());
    assert!(d.join("renders/depth_frame_0000.pgm").exists());
    assert_eq!(
        gspw(d, &["eval", "--renders", "renders", "--gt", "data/clean", "--regions", "data/regions", "--out", "report.json"]),
        0
    );
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert!(report["aggregate"]["region"]["psnr"].as_f64().unwrap() > 20.0);
    assert_eq!(
        gspw(
            d,
            &[
                "fit-features", "--scene", "data/scene_corrupt.gsp", "--features", "data/features", "--masks",
                "data/masks", "--iters", "3", "--out", "feat.gsp", "--trace", "feat_loss.csv",
            ]
        ),
        0
    );
    assert_eq!(std::fs::read_to_string(d.join("feat_loss.csv")).unwrap().lines().count(), 5);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_synth(d, "6");
    std::fs::write(
        d.join("run.toml"),
        "scene = \"data/scene_corrupt.gsp\"\nmasks = \"data/masks\"\nimages = \"data/gt\"\nout = \"out\"\n\
         span_u = 0.0\nspan_v = 0.0\n",
    )
    .unwrap();
    // no candidate inside an empty span
    assert_eq!(gspw(d, &["--config", "run.toml", "run"]), 3);
    assert!(d.join("out/targets.json").exists());
    assert!(d.join("out/run.log").exists());
    // configuration errors
    assert_eq!(gspw(d, &["--config", "run.toml", "run", "--voxel-size", "-1"]), 2);
    std::fs::write(d.join("bad.toml"), "unknown_key = 3\n").unwrap();
    assert_eq!(gspw(d, &["--config", "bad.toml", "run"]), 2);
    let threads = Command::new(env!("CARGO_BIN_EXE_gspw"))
        .current_dir(d)
        .args(["eval", "--renders", "x", "--gt", "y", "--out", "z"])
        .env("GSPW_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
    // I/O
    assert_eq!(gspw(d, &["locate", "--scene", "missing.gsp", "--masks", "data/masks", "--out", "t.json"]), 4);
    // validation: masks that do not match the cameras
    std::fs::create_dir(d.join("tiny")).unwrap();
    std::fs::write(d.join("tiny/frame_0000.pgm"), b"P5\n2 2\n255\n\x00\x00\x00\x00").unwrap();
    assert_eq!(gspw(d, &["locate", "--scene", "data/scene_corrupt.gsp", "--masks", "tiny", "--out", "t.json"]), 5);
}
