//! Configuration-driven experiment runner: train, attack, simulate,
//! rag-eval and report stages over one output directory.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod plot;

pub use config::ExperimentConfig;

/// Stage failure, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad or missing configuration and inputs (exit 2).
    #[error("configuration error: {0}")]
    Config(String),
    /// A stage failed while running (exit 3).
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<spreadsim_core::Error> for CliError {
    fn from(e: spreadsim_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
