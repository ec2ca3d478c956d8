//! Crowd density estimation from dot-annotated scenes.
//!
//! The pipeline renders per-dot Gaussian ground truth, extracts multi-column
//! features, fuses them with global/local density-class context, and trains
//! end to end with a pixel loss plus an optional adversarial term. Everything
//! is deterministic under a single run seed with named sub-streams.

pub mod bundle;
pub mod checks;
pub mod context;
pub mod density;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::Tape;
pub use tensor::Tensor;
