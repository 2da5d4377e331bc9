//! Configuration-driven driver for the memorization-localization
//! experiments. The `memloc` binary is a thin wrapper over [`commands::run`].

pub mod commands;
pub mod config;
pub mod error;
pub mod reports;

pub use commands::{run, Command};
pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};
