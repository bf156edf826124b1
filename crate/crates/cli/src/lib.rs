//! Command-line runner: one TOML config in, field/report/certificate files out.
//!
//! Exit codes: 0 success, 1 solver failure, 2 verification failure,
//! 3 hypothesis-check failure, 64 configuration or usage error.

pub mod config;
pub mod models;
pub mod plot;
pub mod run;

use std::fmt;

pub use config::RunConfig;
pub use run::{run, RunSummary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SOLVER: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_HYPOTHESIS: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Usage(String),
    Core(mfgmaster::Error),
    Io(std::io::Error),
    Internal(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "io: {e}"),
            CliError::Internal(m) => write!(f, "internal: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<mfgmaster::Error> for CliError {
    fn from(e: mfgmaster::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use mfgmaster::Error as E;
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(E::HypothesisRefused { .. }) => EXIT_HYPOTHESIS,
            CliError::Core(
                E::InvalidSpec(_) | E::InvalidArgument(_) | E::Capacity { .. } | E::Unsupported(_) | E::Domain(_),
            ) => EXIT_USAGE,
            CliError::Core(_) | CliError::Io(_) | CliError::Internal(_) => EXIT_SOLVER,
        }
    }
}
