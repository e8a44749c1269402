//! Numerical laboratory for multi-scale analysis of random operators with
//! polynomial long-range hopping on `Z^d`.

pub mod error;
pub mod greens;
pub mod lattice;
pub mod disorder;
pub mod sobolev;
pub mod coupling;
pub mod msa;
pub mod localization;
pub mod stats;
pub mod suite;
pub mod harness;

pub use error::{Error, Result};
