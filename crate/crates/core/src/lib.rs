//! Geometric and numerical core for single-image Gaussian-splat avatar generation.
//!
//! - [`raymap`]: crop-aware per-pixel ray embeddings.
//! - [`cropping`]: body-part crop boxes and zoomed crop cameras.
//! - [`renderer`]: tile-based splat rasterizer with an analytic opacity gradient.
//! - [`composition`]: visibility-aware merging of per-part clouds.
//! - [`diffusion`]: noise schedule and the joint denoise/reconstruct sampling loop.
//! - [`oracle`]: brute-force references and synthetic scenes.
//! - [`io`]: PLY, camera JSON, raw raster and PNG files.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod composition;
pub mod cropping;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod oracle;
pub mod raymap;
pub mod renderer;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    normalize_scene, orbit_rig, validate_splat, Camera, Image, PartLabel, RawSplat, Splat, SplatCloud,
    CANONICAL_CAMERA_DISTANCE,
};
