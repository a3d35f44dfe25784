//! Config-driven command-line pipeline: train, evaluate, predict,
//! inspect-knowledge, and gradcheck.

pub mod commands;
pub mod config;
pub mod pipeline;

use ket_core::model::ModelError;

/// Command failures mapped to process exit codes: 2 for configuration
/// problems, 3 for checkpoint mismatches, 4 for runtime aborts (NaN loss,
/// unwritable artifacts), 1 for a failed gradient check.
#[derive(Debug)]
pub enum CliError {
    Config(Vec<String>),
    Checkpoint(String),
    Runtime(String),
    GradcheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::GradcheckFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Checkpoint(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub fn from_model_error(e: ModelError) -> CliError {
        match e {
            ModelError::CheckpointMismatch(m) => CliError::Checkpoint(m),
            ModelError::CorruptCheckpoint(m) => CliError::Checkpoint(m),
            ModelError::InvalidConfig(m) => CliError::Config(vec![m]),
            ModelError::Io(io) => CliError::Runtime(io.to_string()),
        }
    }

    pub fn report(&self) {
        match self {
            CliError::Config(problems) => {
                eprintln!("configuration invalid ({} problems):", problems.len());
                for p in problems {
                    eprintln!("  - {p}");
                }
            }
            CliError::Checkpoint(m) => eprintln!("checkpoint error: {m}"),
            CliError::Runtime(m) => eprintln!("runtime error: {m}"),
            CliError::GradcheckFailed(m) => eprintln!("{m}"),
        }
    }
}
