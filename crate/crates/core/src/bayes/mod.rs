//! Variational inference over diffusion times.
//!
//! Each block's log-times get a full-rank Gaussian posterior, the network
//! weights stay point estimates, and a single learned variance models
//! pointwise observation noise. Training maximizes a single-sample
//! reparametrized ELBO; prediction marginalizes the posterior by sampling.

pub mod elbo;
pub mod posterior;
pub mod predictive;

pub use elbo::{BayesInit, BayesianNetwork, ElboObjective, ElboTerms};
pub use posterior::{kl_divergence, BlockPosterior, NoiseModel, TimePrior, VariationalPosterior};
pub use predictive::{moments, posterior_predictive, PredictiveModel, PredictiveSamples};
