use std::collections::{BTreeMap, BTreeSet};

use gspw_core::bev::search::{oracle_candidates, preference};
use gspw_core::bev::{
    enumerate_candidates, exhaustive_oracle, patch_affinity, pick_best, select_best, AffinityRecord,
    CandidatePlacement, FeatureCache, GroundManifold, RigidMap, SearchConfig,
};
use gspw_core::index::{build_index, extract_patch, Label, Patch, VoxelIndex, VoxelKey};
use gspw_core::locate::{locate, LocateConfig};
use gspw_core::synth::{generate_road_scene, GenSpec};
use gspw_core::{Camera, Error, Primitive, Scene};
use nalgebra::{Quaternion, Vector3};

/// Flat road of anchors on a 0.5 m grid over `[0, length] x [-4, 4]` with
/// features from `feat(x, y)` and a row of forward-looking cameras.
fn flat_road(length: f64, dim: usize, feat: impl Fn(f64, f64) -> Vec<f64>) -> Scene {
    let mut s = Scene::new(dim);
    let nx = (length / 0.5) as usize;
    for i in 0..nx {
        for j in 0..16 {
            let (x, y) = (0.25 + i as f64 * 0.5, -3.75 + j as f64 * 0.5);
            s.primitives.push(Primitive {
                id: s.primitives.len() as u32,
                position: Vector3::new(x, y, 0.0),
                scale: Vector3::new(0.3, 0.3, 0.03),
                rotation: Quaternion::identity(),
                opacity: 0.98,
                color: Vector3::repeat(0.5),
                feature: feat(x, y),
            });
        }
    }
    let n_cam = (length / 5.0) as usize;
    s.cameras = (0..n_cam)
        .map(|i| {
            let eye = Vector3::new(i as f64 * 5.0, 0.0, 1.6);
            Camera::look_at(i as u32, 64, 32, 32.0, eye, eye + Vector3::new(1.0, 0.0, -0.35))
        })
        .collect();
    s.trajectory = (0..=length as usize).map(|i| Vector3::new(i as f64, 0.0, 1.6)).collect();
    s
}

fn manifold(s: &Scene) -> GroundManifold {
    GroundManifold::fit(&s.trajectory, s.primitives.iter().map(|p| p.position)).unwrap()
}

/// Patch over the given voxels with every anchor labeled intact.
fn intact_patch(index: &VoxelIndex, voxels: &[VoxelKey]) -> Patch {
    let mut p = extract_patch(index, &voxels.iter().copied().collect());
    p.labels = Some(p.anchor_ids.iter().map(|id| (*id, Label::Intact)).collect());
    p
}

fn periodic(x: f64, _y: f64) -> Vec<f64> {
    let a = std::f64::consts::TAU * x / 10.0;
    vec![a.cos() + 1.5, a.sin(), (2.0 * a).cos(), 0.3]
}

#[test]
fn stride_grid_has_sixteen_longitudinal_slots() {
    let s = flat_road(100.0, 4, periodic);
    let idx = build_index(&s, 2.5, Some(Vector3::new(0.0, -5.0, -1.25))).unwrap();
    let key = idx.key_of(&Vector3::new(51.0, 0.5, 0.0));
    let patch = intact_patch(&idx, &[key]);
    let cfg = SearchConfig {
        span_u: 20.0,
        span_v: 0.0,
        stride: None,
    };
    let c = enumerate_candidates(&patch, &idx, &manifold(&s), &cfg, &BTreeSet::new()).unwrap();
    let mut dus: Vec<f64> = c.iter().map(|p| p.delta_u).collect();
    dus.sort_by(f64::total_cmp);
    let expected: Vec<f64> = (-8..=8).filter(|k| *k != 0).map(|k| k as f64 * 2.5).collect();
    assert_eq!(dus, expected);
    for p in &c {
        assert_eq!(p.pairs.len(), 1);
        let (t, src) = p.pairs[0];
        assert_eq!(src, t.offset(((p.delta_u / 2.5).round() as i64, 0, 0)));
    }
}

#[test]
fn empty_surroundings_give_no_candidates() {
    let mut s = flat_road(20.0, 4, periodic);
    let idx_full = build_index(&s, 2.5, Some(Vector3::new(0.0, -5.0, -1.25))).unwrap();
    let key = idx_full.key_of(&Vector3::new(11.0, 0.5, 0.0));
    let keep: BTreeSet<u32> = idx_full.anchors_in(&key).iter().copied().collect();
    s.primitives.retain(|p| keep.contains(&p.id));
    let idx = build_index(&s, 2.5, Some(Vector3::new(0.0, -5.0, -1.25))).unwrap();
    let patch = intact_patch(&idx, &[key]);
    let man = manifold(&flat_road(20.0, 4, periodic));
    let c = enumerate_candidates(&patch, &idx, &man, &SearchConfig::default(), &BTreeSet::new()).unwrap();
    assert!(c.is_empty());
    let cache = FeatureCache::new(&s);
    assert!(matches!(
        exhaustive_oracle(0, &patch, &idx, &man, &BTreeSet::new(), &cache),
        Err(Error::NoCandidate)
    ));
}

#[test]
fn candidates_skip_excluded_and_overlapping_voxels() {
    let s = flat_road(40.0, 4, periodic);
    let idx = build_index(&s, 2.5, Some(Vector3::new(0.0, -5.0, -1.25))).unwrap();
    let keys = [idx.key_of(&Vector3::new(20.5, 0.5, 0.0)), idx.key_of(&Vector3::new(23.0, 0.5, 0.0))];
    let patch = intact_patch(&idx, &keys);
    let bad = idx.key_of(&Vector3::new(28.0, 0.5, 0.0));
    let excluded: BTreeSet<u32> = idx.anchors_in(&bad)[..1].iter().copied().collect();
    let cfg = SearchConfig {
        span_u: 40.0,
        span_v: 5.0,
        stride: None,
    };
    let c = enumerate_candidates(&patch, &idx, &manifold(&s), &cfg, &excluded).unwrap();
    assert!(!c.is_empty());
    for p in &c {
        for (_, src) in &p.pairs {
            assert!(!patch.voxels.contains(src));
            assert!(idx.is_occupied(src));
            assert!(idx.anchors_in(src).iter().all(|id| !excluded.contains(id)));
        }
    }
    // du = +2.5 overlaps the target itself
    assert!(c.iter().all(|p| (p.delta_u - 2.5).abs() > 1e-9 || p.delta_v != 0.0));
}

#[test]
fn stride_candidates_match_brute_force_translations() {
    let g = generate_road_scene(&GenSpec::default()).unwrap();
    let idx = build_index(&g.corrupt, 2.5, None).unwrap();
    let man = g.corrupt.manifold.clone().unwrap();
    let res = locate(&g.corrupt, &g.masks, &LocateConfig::default(), &idx, &man).unwrap();
    let patch = &res.patches[0];
    let cfg = SearchConfig {
        span_u: 200.0,
        span_v: 50.0,
        stride: None,
    };
    let fast: BTreeSet<Vec<VoxelKey>> = enumerate_candidates(patch, &idx, &man, &cfg, &res.excluded)
        .unwrap()
        .iter()
        .map(|c| c.source_voxels())
        .collect();
    let brute: BTreeSet<Vec<VoxelKey>> = oracle_candidates(patch, &idx, &man, &res.excluded)
        .unwrap()
        .iter()
        .map(|c| c.source_voxels())
        .collect();
    assert!(!fast.is_empty());
    assert_eq!(fast, brute);
}

#[test]
fn identity_and_orthogonal_affinities() {
    let s = flat_road(60.0, 4, |x, _| if x < 30.0 { vec![1.0, 0.5, 0.0, 0.0] } else { vec![0.0, 0.0, 0.7, 1.0] });
    let idx = build_index(&s, 2.5, Some(Vector3::new(0.0, -5.0, -1.25))).unwrap();
    let key = idx.key_of(&Vector3::new(16.0, 0.5, 0.0));
    let patch = intact_patch(&idx, &[key]);
    let cache = FeatureCache::new(&s);
    let identity = CandidatePlacement {
        pairs: vec![(key, key)],
        map: RigidMap::translation(Vector3::zeros()),
        delta_u: 0.0,
        delta_v: 0.0,
    };
    let r = patch_affinity(0, &patch, &identity, &cache).unwrap();
    assert!((r.score - 1.0).abs() < 1e-6, "{}", r.score);

    let far = CandidatePlacement {
        pairs: vec![(key, key.offset((10, 0, 0)))],
        map: RigidMap::translation(Vector3::new(-25.0, 0.0, 0.0)),
        delta_u: 25.0,
        delta_v: 0.0,
    };
    let r = patch_affinity(0, &patch, &far, &cache).unwrap();
    assert!(r.score.abs() < 1e-6, "{}", r.score);
}

fn record(score: f64, du: f64, dv: f64, key: i64) -> AffinityRecord {
    AffinityRecord {
        patch: 0,
        placement: CandidatePlacement {
            pairs: vec![(VoxelKey(0, 0, 0), VoxelKey(key, 0, 0))],
            map: RigidMap::translation(Vector3::zeros()),
            delta_u: du,
            delta_v: dv,
        },
        score,
        target_frame: 0,
        source_frame: 0,
    }
}

#[test]
fn ties_prefer_the_nearer_placement() {
    let recs = vec![record(0.9, -10.0, 0.0, -4), record(0.9, 5.0, 0.0, 2)];
    assert_eq!(pick_best(&recs).unwrap().placement.delta_u, 5.0);
    let recs = vec![record(0.9, 5.0, 2.5, 2), record(0.9, -5.0, 0.0, -2)];
    assert_eq!(pick_best(&recs).unwrap().placement.delta_u, -5.0);
    let recs = vec![record(0.9, 5.0, 0.0, 2), record(0.9, -5.0, 0.0, -2)];
    assert_eq!(pick_best(&recs).unwrap().placement.delta_u, -5.0);
    let recs = vec![record(0.5, 2.5, 0.0, 1)];
    assert_eq!(pick_best(&recs).unwrap().score, 0.5);
    assert_eq!(preference(&record(0.91, 20.0, 0.0, 8), &record(0.9, 2.5, 0.0, 1)), std::cmp::Ordering::Less);
}

fn located(seed: u64) -> (gspw_core::synth::SynthScene, VoxelIndex, gspw_core::locate::LocateResult) {
    let g = generate_road_scene(&GenSpec { seed, ..GenSpec::default() }).unwrap();
    let idx = build_index(&g.corrupt, 2.5, None).unwrap();
    let res = locate(&g.corrupt, &g.masks, &LocateConfig::default(), &idx, g.corrupt.manifold.as_ref().unwrap()).unwrap();
    (g, idx, res)
}

#[test]
fn planted_repeat_scores_highest_and_scaling_changes_nothing() {
    let (g, idx, res) = located(3);
    let man = g.corrupt.manifold.clone().unwrap();
    let removed = g.corrupt.without(&res.targets);
    let cache = FeatureCache::new(&removed);
    let cfg = SearchConfig::default();
    let (best, scored) = select_best(0, &res.patches[0], &idx, &man, &cfg, &res.excluded, &cache).unwrap();
    let on_period = |r: &AffinityRecord| {
        let k = (r.placement.delta_u / 10.0).round();
        k != 0.0 && (r.placement.delta_u - 10.0 * k).abs() < 1e-6 && r.placement.delta_v == 0.0
    };
    let repeat = scored.iter().filter(|r| on_period(r)).map(|r| r.score).fold(f64::MIN, f64::max);
    let others = scored.iter().filter(|r| (r.placement.delta_u / 10.0).fract().abs() > 0.2 && (r.placement.delta_u / 10.0).fract().abs() < 0.8).map(|r| r.score).fold(f64::MIN, f64::max);
    assert!(repeat > others, "repeat {repeat} vs off-phase {others}");
    assert!(scored.iter().all(|r| (-1.0..=1.0).contains(&r.score)));

    let mut scaled = removed.clone();
    for p in &mut scaled.primitives {
        for f in &mut p.feature {
            *f *= 3.7;
        }
    }
    let cache2 = FeatureCache::new(&scaled);
    let (best2, _) = select_best(0, &res.patches[0], &idx, &man, &cfg, &res.excluded, &cache2).unwrap();
    assert_eq!(best.placement.source_voxels(), best2.placement.source_voxels());
}

#[test]
fn full_span_search_agrees_with_the_oracle() {
    let mut agree = BTreeMap::new();
    for seed in 10..13 {
        let (g, idx, res) = located(seed);
        let man = g.corrupt.manifold.clone().unwrap();
        let removed = g.corrupt.without(&res.targets);
        let cache = FeatureCache::new(&removed);
        let cfg = SearchConfig {
            span_u: 200.0,
            span_v: 50.0,
            stride: None,
        };
        let (best, _) = select_best(0, &res.patches[0], &idx, &man, &cfg, &res.excluded, &cache).unwrap();
        let oracle = exhaustive_oracle(0, &res.patches[0], &idx, &man, &res.excluded, &cache).unwrap();
        agree.insert(seed, best.placement.source_voxels() == oracle.placement.source_voxels());
    }
    assert!(agree.values().all(|a| *a), "{agree:?}");
}

#[test]
fn fully_degraded_patch_is_scored_through_its_voxel_ring() {
    let s = flat_road(100.0, 4, periodic);
    let idx = build_index(&s, 2.5, Some(Vector3::new(0.0, -5.0, -1.25))).unwrap();
    let key = idx.key_of(&Vector3::new(51.0, 0.5, 0.0));
    let mut patch = extract_patch(&idx, &[key].into_iter().collect());
    patch.labels = Some(patch.anchor_ids.iter().map(|id| (*id, Label::Missing)).collect());
    let excluded: BTreeSet<_> = patch.anchor_ids.iter().copied().collect();
    let removed = s.without(&excluded);
    let cache = FeatureCache::new(&removed);
    let identity = CandidatePlacement {
        pairs: vec![(key, key)],
        map: RigidMap::translation(Vector3::zeros()),
        delta_u: 0.0,
        delta_v: 0.0,
    };
    assert!(matches!(patch_affinity(0, &patch, &identity, &cache), Err(Error::AffinityUndefined(_))));
    let cfg = SearchConfig {
        span_u: 20.0,
        span_v: 0.0,
        stride: None,
    };
    let (best, _) = select_best(0, &patch, &idx, &manifold(&s), &cfg, &excluded, &cache).unwrap();
    // the ring around the patch repeats with the 10 m period too
    assert!((best.placement.delta_u.abs() - 10.0).abs() < 1e-9, "du {}", best.placement.delta_u);
}

#[test]
fn search_in_a_multithreaded_pool_matches_one_thread_and_never_blocks() {
    let (g, idx, res) = located(0);
    let run = move |threads: usize| {
        let (g, idx, res) = (g.clone(), idx.clone(), res.clone());
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let best = pool.install(|| {
                let man = g.corrupt.manifold.clone().unwrap();
                let removed = g.corrupt.without(&res.targets);
                // a fresh cache, so frames are first rendered from inside the scoring jobs
                let cache = FeatureCache::new(&removed);
                let cfg = SearchConfig::default();
                select_best(0, &res.patches[0], &idx, &man, &cfg, &res.excluded, &cache).unwrap().0
            });
            tx.send(best).unwrap();
        });
        rx.recv_timeout(std::time::Duration::from_secs(120)).expect("search finished without deadlocking")
    };
    let one = run.clone()(1);
    let four = run(4);
    assert_eq!(one.placement.source_voxels(), four.placement.source_voxels());
    assert_eq!(one.score, four.score);
}
