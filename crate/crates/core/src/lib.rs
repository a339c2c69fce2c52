//! Neural processes with distance-aware local latents for low-dimensional regression.
//!
//! The crate contains the differentiable numerics, the extremal singular-value
//! solvers behind the bi-Lipschitz regularizer, Gaussian-process task
//! generation, the CNP/NP/DNP model family, calibration metrics, and the
//! training loop used by the `np-lab` command-line tool.

pub mod error;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod rng;
pub mod spectral;
pub mod taskgen;
pub mod training;

pub use error::{Error, Result};
