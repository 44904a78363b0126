//! File formats and command implementations behind the `craftlab` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod scenario_file;

pub use config::{LoadedConfig, RunConfig};
pub use error::{CliError, Result};
