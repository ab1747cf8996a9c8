use std::collections::BTreeMap;

use gspw_core::eval::{evaluate_inpainting, frame_metrics, psnr, EvalReport, MIN_REGION_PIXELS};
use gspw_core::fit::{ssim, ssim_region};
use gspw_core::raster::{Bitmap, Raster};
use gspw_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Raster {
    Raster::from_vec(w, h, 3, (0..w * h * 3).map(|_| rng.gen()).collect())
}

fn add_noise(rng: &mut ChaCha8Rng, img: &Raster, amp: f64) -> Raster {
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v += (rng.gen::<f64>() - 0.5) * amp);
    out
}

fn block(w: usize, h: usize, x0: usize, y0: usize, bw: usize, bh: usize) -> Bitmap {
    let mut m = Bitmap::new(w, h);
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            m.set(x, y, true);
        }
    }
    m
}

/// Straightforward reference: mean squared error over every value in a loop.
fn reference_psnr(a: &Raster, b: &Raster) -> f64 {
    let mut se = 0.0;
    for i in 0..a.data.len() {
        se += (a.data[i] - b.data[i]).powi(2);
    }
    10.0 * (1.0 / (se / a.data.len() as f64)).log10()
}

#[test]
fn identical_images_give_the_infinity_sentinel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_image(&mut rng, 16, 12);
    assert_eq!(psnr(&a, &a, None).unwrap(), f64::INFINITY);
}

#[test]
fn zero_versus_half_is_six_db() {
    let a = Raster::filled(8, 8, 3, 0.0);
    let b = Raster::filled(8, 8, 3, 0.5);
    let p = psnr(&a, &b, None).unwrap();
    assert!((p - 10.0 * 4f64.log10()).abs() < 1e-12);
    assert!((p - 6.0206).abs() < 1e-4);
}

#[test]
fn psnr_matches_reference_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (w, h) = (rng.gen_range(4..40), rng.gen_range(4..40));
        let a = random_image(&mut rng, w, h);
        let b = random_image(&mut rng, w, h);
        assert!((psnr(&a, &b, None).unwrap() - reference_psnr(&a, &b)).abs() < 1e-9);
    }
}

#[test]
fn psnr_rejects_mismatched_inputs() {
    let a = Raster::new(8, 8, 3);
    assert!(matches!(psnr(&a, &Raster::new(8, 9, 3), None), Err(Error::DimensionMismatch { .. })));
    assert!(matches!(psnr(&a, &a, Some(&Bitmap::new(4, 4))), Err(Error::DimensionMismatch { .. })));
    assert!(psnr(&a, &a, Some(&Bitmap::new(8, 8))).is_err());
}

#[test]
fn masked_psnr_ignores_pixels_outside() {
    let a = Raster::filled(10, 10, 3, 0.2);
    let mut b = a.clone();
    let m = block(10, 10, 2, 2, 4, 4);
    for y in 0..10 {
        for x in 0..10 {
            if !m.get(x, y) {
                b.set(x, y, 0, 0.9);
            }
        }
    }
    assert_eq!(psnr(&a, &b, Some(&m)).unwrap(), f64::INFINITY);
    assert!(psnr(&a, &b, None).unwrap().is_finite());
}

#[test]
fn all_true_region_equals_global_metrics_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_image(&mut rng, 30, 20);
    let b = add_noise(&mut rng, &a, 0.2);
    let all = Bitmap::filled(30, 20, true);
    assert_eq!(psnr(&a, &b, Some(&all)).unwrap(), psnr(&a, &b, None).unwrap());
    assert_eq!(ssim_region(&a, &b, &all).unwrap(), ssim(&a, &b).unwrap());
    let m = frame_metrics(0, &a, &b, &all).unwrap();
    assert_eq!(m.region.psnr, Some(m.psnr));
    assert_eq!(m.region.ssim, Some(m.ssim));
}

#[test]
fn small_regions_are_marked_insufficient() {
    let a = Raster::filled(20, 20, 3, 0.3);
    let b = Raster::filled(20, 20, 3, 0.4);
    let small = block(20, 20, 0, 0, 9, 11);
    assert!(small.count() < MIN_REGION_PIXELS);
    let m = frame_metrics(0, &a, &b, &small).unwrap();
    assert!(!m.region.sufficient);
    assert_eq!((m.region.psnr, m.region.ssim), (None, None));
    let big = block(20, 20, 0, 0, 10, 10);
    let m = frame_metrics(0, &a, &b, &big).unwrap();
    assert!(m.region.sufficient && m.region.psnr.is_some());
}

#[test]
fn perfect_result_reports_infinite_region_psnr_and_unit_ssim() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut imgs = BTreeMap::new();
    let mut regions = BTreeMap::new();
    for f in 0..3u32 {
        imgs.insert(f, random_image(&mut rng, 24, 16));
        regions.insert(f, block(24, 16, 4, 2, 12, 10));
    }
    let r = evaluate_inpainting(&imgs, &imgs, &regions).unwrap();
    assert_eq!(r.aggregate.region.psnr, Some(f64::INFINITY));
    assert_eq!(r.aggregate.region.ssim, Some(1.0));
    assert_eq!(r.aggregate.psnr, f64::INFINITY);
    assert!(r.frames.iter().all(|m| m.region.psnr == Some(f64::INFINITY) && m.ssim == 1.0));
    assert!(r.missing_frames.is_empty());
}

#[test]
fn missing_frames_are_listed_not_fatal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut renders = BTreeMap::new();
    let mut gt = BTreeMap::new();
    for f in 0..4u32 {
        let img = random_image(&mut rng, 12, 12);
        if f != 1 {
            renders.insert(f, add_noise(&mut rng, &img, 0.1));
        }
        if f != 3 {
            gt.insert(f, img);
        }
    }
    let r = evaluate_inpainting(&renders, &gt, &BTreeMap::new()).unwrap();
    assert_eq!(r.missing_frames, vec![1, 3]);
    assert_eq!(r.frames.len(), 2);
    assert!(!r.aggregate.region.sufficient);
    assert!(evaluate_inpainting(&BTreeMap::new(), &gt, &BTreeMap::new()).is_err());
}

#[test]
fn better_regions_score_higher() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut gt = BTreeMap::new();
    let mut good = BTreeMap::new();
    let mut bad = BTreeMap::new();
    let mut regions = BTreeMap::new();
    for f in 0..3u32 {
        let img = random_image(&mut rng, 32, 24);
        good.insert(f, add_noise(&mut rng, &img, 0.05));
        bad.insert(f, add_noise(&mut rng, &img, 0.4));
        gt.insert(f, img);
        regions.insert(f, block(32, 24, 8, 4, 16, 12));
    }
    let g = evaluate_inpainting(&good, &gt, &regions).unwrap();
    let b = evaluate_inpainting(&bad, &gt, &regions).unwrap();
    assert!(g.aggregate.region.psnr.unwrap() > b.aggregate.region.psnr.unwrap());
    assert!(g.aggregate.region.ssim.unwrap() > b.aggregate.region.ssim.unwrap());
}

#[test]
fn report_round_trips_through_json_with_infinity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = random_image(&mut rng, 16, 16);
    let imgs = BTreeMap::from([(0u32, img)]);
    let regions = BTreeMap::from([(0u32, block(16, 16, 0, 0, 12, 12))]);
    let r = evaluate_inpainting(&imgs, &imgs, &regions).unwrap();
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"inf\""));
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psnr_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng, 9, 7);
        let b = random_image(&mut rng, 9, 7);
        prop_assert_eq!(psnr(&a, &b, None).unwrap(), psnr(&b, &a, None).unwrap());
    }

    #[test]
    fn adding_noise_never_raises_psnr(seed in any::<u64>()) {
        // Noise added on top of an already noisy image: the expected error
        // strictly grows, and at 4x the amplitude it does so reliably.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference = random_image(&mut rng, 24, 24);
        let noisy = add_noise(&mut rng, &reference, 0.05);
        let noisier = add_noise(&mut rng, &noisy, 0.2);
        prop_assert!(psnr(&noisier, &reference, None).unwrap() <= psnr(&noisy, &reference, None).unwrap());
    }
}
