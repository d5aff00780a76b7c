//! Spectral Hartree solver, symplectic Bogoliubov kernel dynamics and a
//! few-mode Fock-space reference, with numerical certificates for the
//! associated dispersive and Gronwall-type bounds.

pub mod certificate;
pub mod config;
pub mod error;
pub mod experiment;
pub mod fit;
pub mod flow;
pub mod fock;
pub mod grid;
pub mod hartree;
pub mod kernels;
pub mod oracle;

pub use error::{Error, Result};
pub use grid::{make_grid, Direction, Field, FieldNorms, GridSpec, Spectral, C64};
