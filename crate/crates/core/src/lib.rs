//! Tensor-based channel estimation and tracking for IRS-assisted
//! extremely-large-array links with hybrid near/far-field scattering.

pub mod beamforming;
pub mod channel;
pub mod config;
pub mod error;
pub mod grid;
pub mod model;
pub mod omp;
pub mod pipeline;
pub mod priors;
pub mod selftest;
pub mod spvbi;
pub mod support_mp;
pub mod tensor;

pub use error::{Error, Result};
