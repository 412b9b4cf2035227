//! Command-line driver: configuration parsing and the six commands.

pub mod commands;
pub mod config;

pub use commands::{execute, CmdError, Invocation, EXIT_FAILURE, EXIT_IO, EXIT_MAX_STEPS, EXIT_MONITOR, EXIT_PRECONDITION};
pub use config::{parse_config, parse_config_in, Mode, RunConfig};
