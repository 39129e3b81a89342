//! Autoregressive image diffusion for dynamic MRI reconstruction at desk
//! scale: unitary FFTs and a seeded RNG, the multi-coil forward operator,
//! diffusion schedules and updates, noise predictors (a Gaussian oracle and
//! a small causal-attention network with its own autodiff), sequence
//! generation, posterior sampling, synthetic phantoms and file formats.

pub mod cli;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod mri;
pub mod numerics;
pub mod sampler;

pub use error::{AidError, Result};
pub use numerics::{ComplexArray2D, RngStream};
