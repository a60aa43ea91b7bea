//! Synthetic operator-learning datasets.
//!
//! Three periodic tasks with certified targets: the heat semigroup (exact),
//! screened Poisson `(I − Δ)u = a` (exact) and Darcy-lite
//! `−∇·(a∇u) + u = a` (preconditioned CG to a relative residual of 1e-10).

pub mod format;
pub mod random_field;
pub mod scaler;
pub mod tasks;

pub use format::{load_field, read_field, save_field, write_field, Manifest, SampleFiles};
pub use random_field::{sample_random_field, RandomFieldSpec};
pub use scaler::StandardScaler;
pub use tasks::{
    generate, generate_sample, heat_target, screened_poisson, solve_darcy, DarcySolution, Dataset,
    OperatorTask, Sample, TaskKind, DARCY_TOLERANCE,
};
