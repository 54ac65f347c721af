//! Command-line experiment runner: config parsing, the `run`, `ablate`,
//! `gen-data` and `eval` commands, and CSV/JSON result files.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;

use clap::Parser;

pub use commands::{Cli, Command};
pub use config::{config_hash, render, ConfigError, ExperimentConfig, RawConfig};

/// Exit status of a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Config = 1,
    Runtime = 2,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] pifs_core::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit(&self) -> Exit {
        match self {
            CliError::Config(_) | CliError::Usage(_) => Exit::Config,
            CliError::Core(pifs_core::Error::Config(_)) => Exit::Config,
            CliError::Core(_) | CliError::Io { .. } => Exit::Runtime,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Exit::Config as i32 } else { Exit::Ok as i32 };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => Exit::Ok as i32,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit() as i32
        }
    }
}
