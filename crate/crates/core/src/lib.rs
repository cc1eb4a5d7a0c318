//! Differentially private Wasserstein GAN for graph-structured time series.
//!
//! The crate trains a WGAN whose critic sees graph-embedded spatiotemporal
//! windows, sanitizes critic gradients with per-example clipping and
//! Gaussian noise, tracks the (epsilon, delta) budget with a Renyi-DP
//! accountant, and evaluates generated data with the
//! train-on-synthetic/test-on-real protocol.

pub mod checkpoint;
pub mod data;
pub mod discriminator;
pub mod eval;
pub mod generator;
pub mod gradcheck;
pub mod graph;
pub mod privacy;
pub mod tensor;
pub mod training;

pub use tensor::{Tape, Tensor, TensorError, Var};
