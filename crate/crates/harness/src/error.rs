use std::io;

use ligs_core::config::ConfigError;
use ligs_core::metrics::MetricsError;
use ligs_core::theory::TheoryError;
use thiserror::Error;

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("fixture rejected: {0}")]
    Fixture(#[from] TheoryError),
    #[error("missing runs: {}", .0.join(", "))]
    MissingRuns(Vec<String>),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{phase} failed at env step {step}: {source}")]
    Runtime {
        phase: &'static str,
        step: u64,
        #[source]
        source: BoxError,
    },
    #[error("property check failed: {0}")]
    Property(String),
}

impl HarnessError {
    pub fn runtime(phase: &'static str, step: u64, source: impl Into<BoxError>) -> Self {
        HarnessError::Runtime {
            phase,
            step,
            source: source.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        HarnessError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 validation, 2 property failure, 3 runtime abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_)
            | HarnessError::Metrics(_)
            | HarnessError::Fixture(_)
            | HarnessError::MissingRuns(_)
            | HarnessError::Invalid(_) => 1,
            HarnessError::Property(_) => 2,
            HarnessError::Io { .. } | HarnessError::Runtime { .. } => 3,
        }
    }
}
