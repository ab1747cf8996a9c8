//! Bird's-eye-view search over the road manifold: candidate placements of
//! source patches, feature affinity scoring and best-source selection.

mod manifold;

pub use manifold::{
    fit_ground_manifold, Frame, GroundManifold, ManifoldSample, CORRIDOR_HALF_WIDTH, HEIGHT_RADIUS, SAMPLE_STEP,
};
pub mod search;

pub use search::{
    enumerate_candidates, exhaustive_oracle, patch_affinity, pick_best, select_best, AffinityRecord,
    CandidatePlacement, FeatureCache, RigidMap, SearchConfig,
};
