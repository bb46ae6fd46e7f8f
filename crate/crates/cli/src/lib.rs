//! The `aseg` command line: phantom generation, training, evaluation,
//! ablations, the box-offset study and mask scoring.
//!
//! Exit codes: 0 success, 1 I/O or format failure, 2 usage or config error,
//! 3 numeric abort during training, 4 incompatible artifact.

use std::fmt;

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{run, Cli, Command};

pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_INCOMPATIBLE: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<aseg_core::Error> for CliError {
    fn from(e: aseg_core::Error) -> Self {
        use aseg_core::Error as E;
        let code = match &e {
            E::Config(_) | E::Invalid(_) => EXIT_USAGE,
            E::NumericAbort { .. } | E::NonFinite { .. } => EXIT_NUMERIC,
            E::Incompatible(_) | E::Shape { .. } => EXIT_INCOMPATIBLE,
            E::Io(_) | E::Json(_) | E::Format(_) => EXIT_IO,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self { code: EXIT_IO, message: e.to_string() }
    }
}
