use gspw_core::index::{build_index, voxel_of, VoxelIndex};
use gspw_core::{Primitive, Scene};
use nalgebra::{Quaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_anchors(seed: u64, n: usize, extent: f64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Scene::new(0);
    s.primitives = (0..n)
        .map(|i| Primitive {
            id: i as u32,
            position: Vector3::new(
                rng.gen_range(-extent..extent),
                rng.gen_range(-extent..extent),
                rng.gen_range(-extent / 10.0..extent / 10.0),
            ),
            scale: Vector3::repeat(0.1),
            rotation: Quaternion::identity(),
            opacity: 0.5,
            color: Vector3::repeat(0.5),
            feature: Vec::new(),
        })
        .collect();
    s
}

/// Count of round-trip violations: anchor -> voxel -> anchors must contain
/// the anchor, and every listed anchor must map back to its voxel.
fn violations(scene: &Scene, idx: &VoxelIndex) -> usize {
    let mut bad = 0;
    for p in &scene.primitives {
        let key = voxel_of(&p.position, idx);
        if idx.voxel_of_anchor(p.id) != Some(key) || !idx.anchors_in(&key).contains(&p.id) {
            bad += 1;
        }
        let (lo, hi) = idx.bounds(&key);
        if (0..3).any(|a| p.position[a] < lo[a] || p.position[a] >= hi[a]) {
            bad += 1;
        }
    }
    for (key, ids) in idx.occupied() {
        bad += ids.iter().filter(|id| idx.voxel_of_anchor(**id) != Some(*key)).count();
    }
    bad
}

#[test]
fn hundred_thousand_anchors_round_trip() {
    let s = random_anchors(1, 100_000, 200.0);
    let idx = build_index(&s, 2.5, None).unwrap();
    assert_eq!(violations(&s, &idx), 0);
    assert_eq!(idx.anchor_count(), 100_000);
    assert_eq!(idx.occupied().map(|(_, ids)| ids.len()).sum::<usize>(), 100_000);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_anchor_round_trips(seed in any::<u64>(), n in 0usize..400, size in 0.2f64..6.0) {
        let s = random_anchors(seed, n, 30.0);
        let idx = build_index(&s, size, None).unwrap();
        prop_assert_eq!(violations(&s, &idx), 0);
        prop_assert_eq!(idx.anchor_count(), n);
    }

    #[test]
    fn index_ignores_storage_order(seed in any::<u64>(), n in 1usize..300) {
        let s = random_anchors(seed, n, 20.0);
        let mut r = s.clone();
        r.primitives.reverse();
        let a = build_index(&s, 2.5, None).unwrap();
        let b = build_index(&r, 2.5, None).unwrap();
        let key_sets = |i: &VoxelIndex| i.occupied().map(|(k, ids)| {
            let mut ids = ids.clone();
            ids.sort_unstable();
            (*k, ids)
        }).collect::<Vec<_>>();
        prop_assert_eq!(key_sets(&a), key_sets(&b));
    }
}
