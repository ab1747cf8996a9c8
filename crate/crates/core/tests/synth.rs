use std::collections::BTreeSet;

use gspw_core::render::{render, Channels, RenderOptions};
use gspw_core::scene::scene_to_bytes;
use gspw_core::synth::{generate_road_scene, write_synth, GenSpec};

fn small() -> GenSpec {
    GenSpec {
        road_length: 40.0,
        camera_count: 8,
        image_width: 128,
        image_height: 64,
        focal: 64.0,
        ..GenSpec::default()
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let spec = GenSpec { seed: 7, ..small() };
    let a = generate_road_scene(&spec).unwrap();
    let b = generate_road_scene(&spec).unwrap();
    assert_eq!(scene_to_bytes(&a.clean), scene_to_bytes(&b.clean));
    assert_eq!(scene_to_bytes(&a.corrupt), scene_to_bytes(&b.corrupt));
    assert_eq!(a.manifest, b.manifest);
    let da = tempfile::tempdir().unwrap();
    let db = tempfile::tempdir().unwrap();
    write_synth(&a, da.path()).unwrap();
    write_synth(&b, db.path()).unwrap();
    for f in ["scene_corrupt.gsp", "manifest.json", "masks/frame_0000.pgm", "gt/frame_0003.ppm", "features/frame_0001.fmap"] {
        assert_eq!(std::fs::read(da.path().join(f)).unwrap(), std::fs::read(db.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_occluders_leave_the_scene_clean() {
    let spec = GenSpec { occluders: Some(Vec::new()), ..small() };
    let s = generate_road_scene(&spec).unwrap();
    assert_eq!(scene_to_bytes(&s.clean), scene_to_bytes(&s.corrupt));
    assert!(s.manifest.degraded.is_empty());
    assert!(s.masks.iter().all(|m| m.mask.is_empty()));
}

#[test]
fn degraded_set_is_exactly_the_low_opacity_set() {
    for seed in 0..3 {
        let s = generate_road_scene(&GenSpec { seed, ..GenSpec::default() }).unwrap();
        let low: BTreeSet<u32> = s.corrupt.primitives.iter().filter(|p| p.opacity < 0.9).map(|p| p.id).collect();
        let degraded: BTreeSet<u32> = s.manifest.degraded.iter().copied().collect();
        assert_eq!(low, degraded);
        assert!(!degraded.is_empty());
        let ids: BTreeSet<u32> = s.clean.primitives.iter().map(|p| p.id).collect();
        assert!(s.manifest.incomplete.iter().all(|i| ids.contains(i) && !degraded.contains(i)));
        for (c, k) in s.clean.primitives.iter().zip(&s.corrupt.primitives) {
            assert_eq!(c == k, !degraded.contains(&c.id));
        }
        assert!(!s.manifest.occluded_frames.is_empty());
    }
}

#[test]
fn clean_scene_reproduces_its_ground_truth() {
    let s = generate_road_scene(&small()).unwrap();
    for (k, cam) in s.clean.cameras.iter().enumerate() {
        let r = render(&s.clean, cam, &RenderOptions::new(Channels::RGB));
        let rgb = r.rgb.unwrap();
        let gt = &s.gt_images[k];
        let mask = &s.masks[k].mask;
        let (mut se, mut n) = (0.0, 0usize);
        for y in 0..gt.height {
            for x in 0..gt.width {
                if mask.get(x, y) {
                    continue;
                }
                for c in 0..3 {
                    se += (rgb.get(x, y, c) - gt.get(x, y, c)).powi(2);
                    n += 1;
                }
            }
        }
        let psnr = if se == 0.0 { f64::INFINITY } else { 10.0 * (n as f64 / se).log10() };
        assert!(psnr >= 35.0, "frame {k}: {psnr} dB");
    }
}

#[test]
fn default_scene_stats() {
    let s = generate_road_scene(&GenSpec::default()).unwrap();
    assert!(s.clean.primitives.len() <= 20_000);
    let mask_px: Vec<usize> = s.masks.iter().map(|m| m.mask.count()).collect();
    let region_px: Vec<usize> = s.regions.iter().map(|m| m.count()).collect();
    eprintln!(
        "prims {} degraded {} incomplete {} occluded {:?}\nmask px {:?}\nregion px {:?}\nocc {:?}",
        s.clean.primitives.len(),
        s.manifest.degraded.len(),
        s.manifest.incomplete.len(),
        s.manifest.occluded_frames,
        mask_px,
        region_px,
        s.manifest.occluders
    );
}
