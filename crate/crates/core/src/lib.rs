//! Multiplicative SGD.
//!
//! The stochastic gradient of mini-batch SGD factors as the gradient matrix
//! (per-sample gradients as columns) times a random sampling vector. This
//! crate generates sampling vectors from several noise classes, evaluates the
//! resulting noisy gradient steps through a weighted-loss backward pass, and
//! carries the harnesses that check their moments, the averaged least-squares
//! bound, and the strong SDE approximation.

pub mod models;
pub mod noise;
pub mod optim;
pub mod par;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod theory;

pub use rng::{derive_stream, RngStream, GENERATOR_NAME};
