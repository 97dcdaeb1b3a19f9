//! Experiment harness for the meta-learned Hessian-free optimizer: datasets,
//! configuration, training and meta-training runs, metrics, plots and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod plot;

pub use error::{HarnessError, Result};
