//! A small, trainable emotion-conditioned segmentation and explanation model.
//!
//! An image plus an emotion prompt goes in; a binary mask of the regions that
//! evoke that emotion and a short textual explanation come out.

pub mod config;
pub mod dataset;
pub mod emotion;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod lang_decoder;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prefix;
pub mod projector;
pub mod raster;
pub mod seg_decoder;
pub mod selftest;
pub mod train;

pub use config::{FreezeFlags, ModelConfig, Paradigm, Preset, RunConfig, TrainConfig};
pub use emotion::{Emotion, NUM_EMOTIONS};
pub use error::{Error, Result};
pub use raster::{Grid, Image, Mask};
