//! Command-line harness around `trinity-core`: toy data generation,
//! training, robustness evaluation and ablation runs.

pub mod ablation;
pub mod commands;
pub mod error;
pub mod report;

pub use error::{CliError, CliResult};
