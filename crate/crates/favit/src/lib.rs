//! Forgery-aware adaptive vision transformer, desk scale.
//!
//! A frozen vision-transformer backbone augmented with two kinds of adapter:
//! a global adapter that injects additive corrections into every
//! self-attention layer, and a local adapter that cross-attends ViT tokens to
//! multi-scale CNN features with a learnable blend of content-based and purely
//! positional attention. Training combines cross-entropy with a pair-based
//! circle loss over (real, fake) fine-grained pairs measured against the
//! real-class prototype.
//!
//! Everything runs on a hand-built, deterministic reverse-mode tape over dense
//! `f32` tensors, with a 64-bit finite-difference oracle for gradient
//! verification. A procedural image generator supplies a fully reproducible
//! stand-in task with a controllable domain shift, and the training harness
//! replicates the adaptation-strategy ablations at desk scale.
//!
//! See the `book/` directory for a guided tour; its code snippets are
//! compiled and run as doctests.

pub mod ablate;
pub mod archive;
pub mod backbone;
pub mod capture;
pub mod cli;
pub mod cnn;
pub mod config;
pub mod data;
pub mod error;
pub mod imgio;
pub mod gam;
pub mod gradcheck;
pub mod lam;
pub mod loss;
pub mod model;
pub mod metrics;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vars;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// CLI entry point; returns the process exit code.
pub fn run() -> i32 {
    cli::run()
}
