//! Equivariant graph-attention regressor for Hamiltonian corrections.

pub mod equiv;
pub mod params;
pub mod tape;
pub mod tracegrad;
pub mod basis;
mod net;

pub use basis::BasisLayout;
pub use net::{
    envelope, radial_basis, GraphInput, LossGrad, MemberOutput, Model, ModelConfig, Prediction, CHECKPOINT_FORMAT,
    DEFAULT_FEATURE_SPEC,
};
