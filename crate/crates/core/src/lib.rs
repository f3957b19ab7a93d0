//! Multi-view entity segmentation: crop views, a query-based network with a
//! cross-view association stage, set-matching losses, fused inference and
//! class-agnostic evaluation on synthetic high-resolution scenes.

pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod geometry;
pub mod imageio;
pub mod loss;
pub mod mask;
pub mod model;
pub mod matching;
pub mod raster;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use mask::{mask_iou, Mask, Rle};
pub use raster::Raster;
