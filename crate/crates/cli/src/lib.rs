//! Experiment runner: training, SNR sweeps, mixing-weight ablations, channel
//! reports, and gradient checks, with CSV and JSON outputs.
//!
//! Exit codes: 0 ok, 1 internal error, 2 configuration error, 3 artifact
//! error, 4 numerical failure.

pub mod commands;
pub mod config;
pub mod output;

use std::fmt;

pub use commands::*;
pub use config::{parse_snr, ExperimentConfig, Snr};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Artifact(String),
    Numerical(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) => 2,
            CliError::Artifact(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Artifact(m) => write!(f, "artifact error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<wsdc_core::Error> for CliError {
    fn from(e: wsdc_core::Error) -> Self {
        use wsdc_core::Error as E;
        match e {
            E::Config(_) | E::Unsupported(_) => CliError::Config(e.to_string()),
            E::Format(_) | E::Io(_) => CliError::Artifact(e.to_string()),
            E::Numerical { .. } => CliError::Numerical(e.to_string()),
            E::Contract(_) | E::Capacity { .. } => CliError::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Artifact(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Artifact(e.to_string())
    }
}
