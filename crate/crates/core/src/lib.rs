//! Graph recurrent imputation networks for multivariate time series.

pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{GrinError, Result};
