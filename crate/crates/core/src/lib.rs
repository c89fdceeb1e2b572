//! Generative point-cloud modeling with continuous-time denoising diffusion.
//!
//! The crate provides:
//! - [`geometry`]: point-cloud/camera primitives and the camera-frustum
//!   reparameterization,
//! - [`autodiff`]: the reverse-mode differentiation substrate,
//! - [`diffusion`]: the continuous-time noise model and training loss,
//! - [`scorenet`]: the permutation-equivariant inducer-attention score network,
//! - [`conditioning`]: image feature extraction and projective/global
//!   conditioning,
//! - [`samplers`]: stochastic and probability-flow samplers, exact
//!   likelihoods, and inpainting-based upsampling,
//! - [`metrics`]: chamfer/EMD distances and the COV/MMD/1-NNA suite with ICP,
//! - [`harness`]: synthetic datasets, the training loop, checkpoints, and
//!   the command-line interface.

pub mod autodiff;
pub mod conditioning;
pub mod diffusion;
pub mod scorenet;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod samplers;

mod error;

pub use error::{Error, Result};
