//! Knowledge distillation from a bidirectional-LSTM teacher into a small
//! feed-forward student.
//!
//! The pipeline: train the recurrent teacher on hard frame labels, export its
//! per-frame posteriors truncated to a probability-mass threshold (soft
//! alignments), then train the student to minimise cross-entropy (equivalently
//! KL divergence) against those targets.

pub mod alignments;
pub mod checkpoint;
pub mod cli;
pub(crate) mod codec;
pub mod datagen;
pub mod distillation;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{CodecError, Error, Result};
pub use tensor::Tensor;
