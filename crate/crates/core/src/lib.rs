//! Mixture-of-experts layers with percentile-threshold routing and
//! layer-wise expert schedules, plus the training, data and analysis
//! machinery to run schedule ablations on small image datasets.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod optim;
pub mod routing;
pub mod schedules;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
