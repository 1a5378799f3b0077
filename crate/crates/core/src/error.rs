use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its constraints. `field` names the offending key.
    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A numeric argument outside the domain of an operation.
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("vector length mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    /// Malformed IDX input. `field` names the header field or payload that failed.
    #[error("ingestion of {path:?} failed at `{field}`: {reason}")]
    Ingestion {
        path: PathBuf,
        field: &'static str,
        reason: String,
    },

    #[error("client {client_id} has no training data")]
    EmptyClient { client_id: usize },

    #[error("evaluation requires a nonempty dataset")]
    EmptyEvaluation,

    #[error("local training diverged in round {round} for client {client_id}: loss is {loss}")]
    Divergence {
        round: usize,
        client_id: usize,
        loss: f64,
    },

    #[error(
        "adjusted budget for client {client_id} is {epsilon_prime}; noise scale would be infinite"
    )]
    DegenerateBudget {
        client_id: usize,
        epsilon_prime: f64,
    },

    #[error("ledger integrity violated: {0}")]
    Ledger(String),

    #[error("round {round} failed: {reason}")]
    RoundFailure { round: usize, reason: String },

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn parameter(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Machine-readable category, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Parameter { .. } | Error::Shape { .. } => "parameter",
            Error::Ingestion { .. } => "ingestion",
            Error::EmptyClient { .. } | Error::EmptyEvaluation => "data",
            Error::Divergence { .. }
            | Error::DegenerateBudget { .. }
            | Error::RoundFailure { .. } => "training",
            Error::Ledger(_) => "ledger",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code for the category.
    pub fn exit_code(&self) -> u8 {
        match self.category() {
            "config" => 2,
            "parameter" => 3,
            "ingestion" => 4,
            "data" => 5,
            "training" => 6,
            "ledger" => 7,
            _ => 8,
        }
    }
}
