//! Inpainting of anchor-based 3D Gaussian road scenes by patch search.
//!
//! The pipeline locates target anchors from semantic masks, searches the
//! road manifold for a structurally similar source patch, transplants it and
//! fuses the result with a short RGB optimization. A CPU splat renderer
//! supplies projections, feature maps and gradients.

pub mod bev;
pub mod error;
pub mod eval;
pub mod fit;
pub mod fuse;
pub mod index;
pub mod locate;
#[doc(hidden)]
pub mod oracle;
pub mod pipeline;
pub mod raster;
pub mod render;
pub mod scene;
pub mod synth;

pub use error::{exit_code, Error, Result};
pub use index::{build_index, extract_patch, voxel_of, Label, Patch, VoxelIndex, VoxelKey};
pub use raster::{Bitmap, Raster};
pub use render::{render, Channels, RenderOptions, RenderOutput};
pub use scene::{Camera, FeatureMap, FrameMask, Primitive, PrimitiveId, Scene};
