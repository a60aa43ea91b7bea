//! Diffusion-multiplier neural operators.
//!
//! The crate is organised bottom-up:
//!
//! - [`spectral`]: periodic grids, truncated real Fourier transforms, the heat
//!   semigroup and spectral derivatives.
//! - [`nn`]: parameter storage, activations, AdamW with a one-cycle schedule
//!   and a finite-difference gradient checker.
//! - [`operator`]: the diffusion block, a dense Fourier block baseline,
//!   lifting/projection and whole-network assembly with exact adjoints.
//! - [`bayes`]: log-normal priors on diffusion times, full-rank per-block
//!   Gaussian posteriors, the ELBO and posterior-predictive sampling.
//! - [`data`]: synthetic operator-learning tasks with exact or certified
//!   targets, scalers and the on-disk dataset archive.
//! - [`metrics`]: relative L2, Gaussian NLL, miscalibration area and
//!   interval score.
//! - [`train`]: deterministic and variational training loops.

pub mod bayes;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod operator;
pub mod rng;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
pub use spectral::{Field, Grid, ModeSet, SpectralField};
