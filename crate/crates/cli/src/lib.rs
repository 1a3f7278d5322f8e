//! Experiment runner for the weakly supervised training-mining loop: data
//! generation, source training, iterated runs, mining, evaluation and reports.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod svg;

pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, Result};
pub use pipeline::Layout;
