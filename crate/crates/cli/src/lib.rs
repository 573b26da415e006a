//! Library side of the `stochhom` command-line tool.
//!
//! Every subcommand takes a resolved [`RunConfig`], writes its artifacts into
//! the configured output directory and returns a [`CliError`] whose exit code
//! is part of the tool's contract.

pub mod commands;
pub mod config;

pub use config::{Overrides, RunConfig};

use stochhom::ensemble::EnsembleError;
use stochhom::fem::FemError;
use stochhom::model1::ModelError;
use thiserror::Error;

/// Version of the CSV column layout and the JSON summary schema.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("suite failure: {0}")]
    Suite(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Suite(_) => 4,
            CliError::Io(_) => 1,
        }
    }

    /// Classifies a model error raised while working on `field`.
    pub fn model(field: &str, e: ModelError) -> CliError {
        match &e {
            ModelError::Fem(FemError::NonUnitDirection { .. }) => CliError::Config(format!("{field}: {e}")),
            ModelError::Fem(_) | ModelError::SingularNormalization { .. } | ModelError::MeshMismatch(_) => {
                CliError::Solver(format!("{field}: {e}"))
            }
            ModelError::Field(_) | ModelError::Mesh(_) | ModelError::ZeroEta => CliError::Config(format!("{field}: {e}")),
        }
    }

    pub fn ensemble(field: &str, e: EnsembleError) -> CliError {
        match e {
            EnsembleError::InvalidSpec(m) => CliError::Config(format!("{field}: {m}")),
            EnsembleError::Model(m) => CliError::model(field, m),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
