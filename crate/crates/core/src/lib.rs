//! Training library for softmax classifiers with an L2-constrained feature
//! head.
//!
//! The centerpiece is a pair of layers — L2-normalize followed by a learned
//! or fixed scale — that pin every feature descriptor to a hypersphere of
//! radius alpha before the classifier, together with:
//!
//! - hand-written forward/backward kernels for the full layer stack
//!   (convolution, pooling, dense, PReLU) in 64-bit arithmetic,
//! - the closed-form analysis of the scale parameter (average-probability
//!   curve and the lower bound on alpha for a target probability),
//! - a deterministic mini-batch SGD trainer with momentum, per-parameter
//!   multipliers, and bit-exact checkpoint resume,
//! - a verification pipeline: cosine scoring, ROC / TAR@FAR, norm-bucket
//!   diagnostics, template pooling, and angular-spread statistics,
//! - IDX dataset ingestion plus a deterministic synthetic digit generator
//!   for fully offline runs.

pub mod bounds;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod network;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
