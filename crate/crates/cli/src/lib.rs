//! Command-line harness for the monoflow solvers.

pub mod commands;
pub mod config;

pub use commands::{CliError, Report};
pub use config::{ConfigError, RunConfig};
