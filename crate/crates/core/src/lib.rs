//! Feature-guided wall segmentation for floorplan images.
//!
//! The crate bundles a small CPU neural-network engine ([`nn`]), raster and
//! wall-geometry primitives ([`raster`]), a synthetic floorplan generator,
//! the preprocessing pipeline, the wall-crop feature extractor and the
//! segmenter, plus training, tiled inference, evaluation and an HTTP service.

pub mod archive;
pub mod cli;
pub mod error;
pub mod eval;
pub mod dataset;
pub mod featx;
pub mod infer;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod segmenter;
pub mod service;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
