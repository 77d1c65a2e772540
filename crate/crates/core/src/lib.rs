//! Toy-scale preference optimization for reasoning segmentation.
//!
//! The crate provides the full pipeline: synthetic task generation, a tiny
//! deterministic and differentiable segmenter, curriculum collection of
//! text/segmentation preference data, the preference and improvement losses
//! with verified gradients, preference-score-biased ensemble fusion, and the
//! evaluation metric suite (CHAIR, gIoU/cIoU, Pearson).

pub mod collect;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod evaluate;
pub mod linalg;
pub mod losses;
pub mod maskops;
pub mod metrics;
pub mod persist;
pub mod raster;
pub mod rngutil;
pub mod segmenter;
pub mod synth;
pub mod tape;
pub mod tokens;
pub mod toymodel;

pub use error::{Error, Result};
