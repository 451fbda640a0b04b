//! Scenario files, result formats and subcommands of the `capsched`
//! command line, on top of the `capsched-core` simulator.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use capsched_core as core;
pub use config::load_config;
pub use error::{CliError, ErrorKind};
