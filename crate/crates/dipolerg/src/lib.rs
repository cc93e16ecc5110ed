//! Renormalization group tooling for the lattice dipole gas.
//!
//! The crate is organised bottom-up: lattice geometry, lattice Green's
//! functions, the finite-range decomposition of the Coulomb kernel, polymer
//! combinatorics, the dipole gas itself, the truncated RG flow and the
//! constant ledger.

pub mod bounds;
pub mod error;
pub mod frd;
pub mod gas;
pub mod kernels;
pub mod lattice;
pub mod polymers;
pub mod quad;
pub mod rgflow;

pub use error::{Error, Result};
