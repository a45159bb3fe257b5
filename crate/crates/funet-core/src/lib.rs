//! Flow-based video segmentation.
//!
//! The pipeline: estimate dense optical flow between consecutive
//! frames (coarse-to-fine Horn-Schunck), threshold the flow magnitude
//! into a binary motion mask, stack the mask as a fourth channel onto
//! the RGB frame, and feed the result to a small encoder-decoder
//! network trained from scratch with BCE-with-logits and RMSProp.
//! Dataset tooling covers chroma-key ground-truth extraction, virtual
//! background compositing, and fully synthetic labeled sequences.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod imageio;
pub mod model;
pub mod motionmask;
pub mod rng;
pub mod tensorops;
pub mod training;

pub use error::{Error, Result};
