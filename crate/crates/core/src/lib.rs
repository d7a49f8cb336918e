//! Bayesian sparse functional principal components analysis (SFPCA) for
//! irregularly sampled longitudinal data.

pub mod artifacts;
pub mod data;
pub mod draws;
pub mod error;
pub mod loo;
pub mod model;
pub mod predict;
pub mod psis;
pub mod rotate;
pub mod sampler;
pub mod sim;
pub mod spline;
pub mod svg;
pub mod workflow;

pub use error::{Error, Result};
