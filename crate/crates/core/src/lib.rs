//! Cone-beam CT reconstruction at desk scale.
//!
//! The crate covers the full pipeline: synthetic thorax phantoms, a
//! ray-driven forward projector with its exact adjoint, Poisson measurement
//! noise, a conditional neural density field (shared multiresolution
//! hash-encoded MLP modulated per patient by a neural modulation field),
//! classical FDK and Landweber-TV reconstructions, and volumetric
//! PSNR/SSIM metrics.

pub mod baselines;
pub mod encoding;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod projector;
pub mod real;
pub mod rng;
pub mod volume;

pub use error::{Error, Result};
pub use real::Real;
