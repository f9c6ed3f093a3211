//! Equivariant residual correction of spinful tight-binding Hamiltonians.

pub mod error;
pub mod irreps;
pub mod hamiltonian;
pub mod checks;
pub mod datagen;
pub mod lattice;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod spectra;
pub mod trainkit;

pub use error::{Error, Result};
