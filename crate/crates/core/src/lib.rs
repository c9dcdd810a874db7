//! Fully quantized cooperative perception on a synthetic bird's-eye-view benchmark.
//!
//! The crate covers the whole recipe: a toy multi-agent BEV pipeline trained in
//! full precision, post-training quantization with block-wise reconstruction and
//! fusion alignment, codebook-compressed inter-agent messages with a bit-exact
//! wire format, and a latency model for system-level evaluation.

pub mod calib;
pub mod codebook;
pub mod comms;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod quant;
pub mod scene;

pub use error::{Error, Result};
pub use numerics::{FeatureGrid, Pose2D, RngStream};
