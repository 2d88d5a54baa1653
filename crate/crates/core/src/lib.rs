pub mod approx;
pub mod baselines;
pub mod error;
pub mod experiment;
pub mod expfam;
pub mod meta;
pub mod quadrature;
pub mod risk;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};
