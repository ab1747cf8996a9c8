//! Shared fixtures for the benchmarks.

use gspw_core::bev::{fit_ground_manifold, FeatureCache, GroundManifold};
use gspw_core::locate::{locate, LocateConfig, LocateResult};
use gspw_core::synth::{generate_road_scene, GenSpec, SynthScene};
use gspw_core::{build_index, Scene, VoxelIndex};

/// Voxel edge used throughout the benches.
pub const VOXEL_SIZE: f64 = 2.5;

/// A default-size synthetic road (3200 anchors, 30 frames at 256x128).
pub fn road(seed: u64) -> SynthScene {
    generate_road_scene(&GenSpec {
        seed,
        ..GenSpec::default()
    })
    .expect("default road generates")
}

/// Everything the search stage needs, prepared once.
pub struct SearchFixture {
    pub removed: Scene,
    pub index: VoxelIndex,
    pub manifold: GroundManifold,
    pub located: LocateResult,
}

impl SearchFixture {
    pub fn new(synth: &SynthScene) -> Self {
        let scene = &synth.corrupt;
        let index = build_index(scene, VOXEL_SIZE, None).expect("index builds");
        let manifold = match &scene.manifold {
            Some(m) => m.clone(),
            None => fit_ground_manifold(scene).expect("manifold fits"),
        };
        let located = locate(scene, &synth.masks, &LocateConfig::default(), &index, &manifold).expect("targets found");
        let removed = scene.without(&located.targets);
        SearchFixture {
            removed,
            index,
            manifold,
            located,
        }
    }

    pub fn cache(&self) -> FeatureCache<'_> {
        FeatureCache::new(&self.removed)
    }
}
