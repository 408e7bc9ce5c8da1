//! Probabilistic time-series forecasting with a sequence encoder that
//! estimates the parameters of a fixed-form state-space decoder. Forecasts
//! come with an explicit trend/seasonality decomposition and Gaussian
//! uncertainty, trained end-to-end through a small reverse-mode autodiff
//! engine.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod model;
pub mod params;
pub mod runconfig;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
