//! Inference of stochastic transfer operators from unpaired snapshot data.
//!
//! Samples arrive in batches of `M` unpaired input/output points. The crate
//! estimates the joint density of a stochastic map by fitting a coupling on a
//! pair of anchor sets, smoothed through entropic transport kernels, so that
//! the batch-averaged permutation-marginal likelihood is maximized.

pub mod analysis;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod inference;
pub mod kernel;
pub mod seeding;
pub mod solver;
pub mod systems;

pub use error::{Error, Result};
