//! Distributional outcome regression on quantile functions with shape-constrained
//! Bernstein polynomial coefficients.

pub mod bernstein;
pub mod covariance;
pub mod design;
pub mod error;
pub mod inference;
pub mod model;
pub mod normal;
pub mod pava;
pub mod qp;
pub mod quantile;
pub mod rng;
pub mod sim;

pub use error::{DorqfError, Result};
