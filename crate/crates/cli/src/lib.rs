//! Config-driven experiment runner: parse a run specification, execute its
//! cells and persist a summary plus per-cell traces.

pub mod execute;
pub mod spec;

pub use execute::{execute, ExperimentRecord};
pub use spec::{parse_spec, parse_spec_str, RunSpec};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Malformed or inconsistent specification; exit status 2.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}
