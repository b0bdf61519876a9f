//! Library side of the `conv-commsynth` binary: config parsing and the
//! report-producing subcommands.

pub mod commands;
pub mod config;

pub use commands::{cmd_plan, cmd_simulate, cmd_sweep, cmd_verify, Axis, Format, Report};
pub use config::{ConfigError, RunConfig};
