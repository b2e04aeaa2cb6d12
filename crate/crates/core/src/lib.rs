//! Seasonal sea-ice concentration forecasting with selective state-space
//! encoder-decoder networks.

pub mod baselines;
pub mod blocks;
pub mod calendar;
pub mod data;
pub mod error;
pub mod experiment;
pub mod explain;
pub mod forecast;
pub mod init;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod ssm;
pub mod train;

pub use calendar::{Month, MonthRange};
pub use error::{Error, Result};
pub use model::{build_model, Forecaster, Model, ModelConfig};
