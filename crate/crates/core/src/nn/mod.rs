//! Trainable parameters, activations, optimisation and gradient checking.

pub mod activation;
pub mod gradcheck;
pub mod optim;
pub mod params;

pub use activation::{gelu, gelu_grad, normal_cdf, normal_pdf, tanh, tanh_grad};
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport, Objective};
pub use optim::{adamw_step, one_cycle_lr, AdamWConfig, OptimizerState};
pub use params::{GradBuffer, ParamStore, Tensor};
