//! Semantic occupancy from Gaussian splats, an air-mask vector-quantized
//! occupancy codec, and a multi-scale temporal world model for occupancy
//! forecasting and ego planning.

pub mod am_vae;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod imageio;
pub mod img2occ;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod occupancy;
pub mod splat;
pub mod world;

pub use error::{Error, Result};
pub use geometry::{CameraModel, Rotation, ScaleVector};
pub use occupancy::{AirSplit, ClassSet, SemanticVoxelGrid};
pub use splat::{Gaussian, GaussianSet, RenderGradients, RenderedView};
