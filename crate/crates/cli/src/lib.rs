//! Command-line driver for lagrow: run configuration, checkpoint
//! directories, metrics logs and the train / grow / race / stack / analyze /
//! eval commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod store;
pub mod traces;

pub use config::RunConfig;
pub use error::{CliError, Result};
