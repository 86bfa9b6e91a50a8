//! Desk-scale laboratory for non-resonant Bloch eigenvalues, isoenergetic
//! curves and quasi-plane-wave eigenfunctions of a two-dimensional
//! limit-periodic Schrodinger operator.

pub mod cheese;
pub mod config;
pub mod curves;
pub mod eigenfunction;
pub mod error;
pub mod intervals;
pub mod lattice;
pub mod model;
pub mod numeric;
pub mod oracle;
pub mod output;
pub mod pipeline;
pub mod potential;
pub mod series;

pub use error::{LabError, Result};
pub use num_complex::Complex64 as C64;
