//! Scenario-driven front end for the `flockyap` library.
//!
//! A scenario is a single JSON document (see [`scenario::Scenario`]). The
//! `flockyap` binary exposes four subcommands on top of it:
//!
//! * `simulate` integrates the scenario and writes the trajectory CSV, a full
//!   state dump and a JSON report;
//! * `verify-pe` certifies persistence of excitation for a grid of window lengths;
//! * `monitor-lyapunov` replays a state dump through the dissipation monitors;
//! * `sweep` varies one numeric scenario field and tabulates the results.
//!
//! Exit codes: 0 success, 1 a requested certificate or monitor failed,
//! 2 invalid configuration, 3 numerical blow-up, 4 any other failure.

// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub mod commands;
pub mod scenario;
pub mod sweep;

pub use scenario::Scenario;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("invalid scenario: {0}")]
    Model(#[from] flockyap::Error),
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("numerical blow-up: {0}")]
    BlowUp(flockyap::Error),
    #[error(transparent)]
    Model(flockyap::Error),
    #[error("cannot write {}: {source}", path.display())]
    Output { path: PathBuf, source: io::Error },
}

impl From<flockyap::Error> for CliError {
    fn from(e: flockyap::Error) -> Self {
        match e {
            flockyap::Error::NonFinite { .. } => CliError::BlowUp(e),
            e => CliError::Model(e),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::BlowUp(_) => 3,
            CliError::Model(_) | CliError::Output { .. } => 4,
        }
    }
}
