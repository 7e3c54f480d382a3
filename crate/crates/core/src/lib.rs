//! Box-prompted plane instance segmentation on RGB-D imagery.
//!
//! The pipeline pairs a transformer encoder over the RGB bands with a small
//! convolutional branch that carries depth features and injects them as
//! residual updates before every transformer block. A box prompt selects the
//! instance; the decoder emits three candidate masks per prompt.
//!
//! Module map:
//!
//! - [`data`]: samples, annotations, synthetic scenes, augmentations, file IO
//! - [`backbone`]: the dual-complexity encoder
//! - [`promptdecoder`]: box prompt encoding and the three-mask decoder
//! - [`model`]: the assembled network and mask selection
//! - [`losses`]: focal, dice, their combinations, min-of-three routing
//! - [`detector`]: box providers (ground-truth oracle, box files)
//! - [`training`]: optimizer, schedule, freeze policy, checkpoints, trainers
//! - [`metrics`]: Rand index, variation of information, segmentation covering
//! - [`inference`]: dataset-level prediction and evaluation helpers
//! - [`config`]: the run configuration file

pub mod backbone;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod promptdecoder;
pub mod training;

pub use error::{Error, Result};
