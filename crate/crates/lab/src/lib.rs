//! Datasets, configuration, training harness and CLI plumbing for
//! dynamic-regularization experiments on top of `dynreg-core`.

pub mod config;
pub mod data;
pub mod error;
pub mod harness;

pub use config::{DatasetSpec, RunConfig};
pub use error::{DataError, LabError, Result};
