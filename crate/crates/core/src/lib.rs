//! Multivariate Gaussian random fields defined through systems of
//! stochastic partial differential equations, discretized with linear
//! finite elements on triangulated planar domains.

pub mod cholesky;
pub mod error;
pub mod fem;
pub mod gmrf;
pub mod inference;
pub mod io;
pub mod matern;
pub mod mesh;
pub mod nugget;
pub mod observations;
pub mod optim;
pub mod precision;
pub mod sparse;
pub mod special;
pub mod spectral;

pub use error::{Error, Result};
