//! Config-driven experiment runner behind the `robustshift` binary.

pub mod config;
pub mod datasets;
pub mod error;
pub mod num;
pub mod report;
pub mod runner;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use report::RunReport;
