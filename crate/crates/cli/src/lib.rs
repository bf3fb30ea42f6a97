//! The `vab` command line: configuration, data pipeline and subcommands.

pub mod commands;
pub mod config;
pub mod exit;
pub mod pipeline;

pub use commands::{run, Cli};
pub use exit::{CliError, CliResult};
