//! Neural-operator blocks and whole-network assembly.
//!
//! A network lifts `d_a` input channels to width `d_c` with a pointwise
//! two-layer MLP, zero-pads the spatial axes, applies `M` blocks, crops, and
//! projects back to `d_u` channels with another pointwise MLP. Every stage
//! has a hand-written adjoint; see [`network::Network::backward`].

pub mod block;
pub mod count;
pub mod fno;
pub mod network;
pub mod padding;
pub mod pointwise;
pub mod spec;

pub use block::{gradient_features, DinozaurBlock};
pub use count::{count_bayes_params, count_params, ParamRow, ParamTable};
pub use fno::FnoBlock;
pub use network::{AdjointFault, ForwardCache, Network};
pub use padding::{crop, pad};
pub use pointwise::{Activation, AffineLayer};
pub use spec::{BlockKind, NetworkSpec};
