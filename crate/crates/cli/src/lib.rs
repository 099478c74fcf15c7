//! Command-line front end: data generation, training, attacks, evaluation
//! and plots, driven by one JSON experiment config.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, Result};
