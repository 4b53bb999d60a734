use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid market-model parameters (non-PSD correlation, bad time grid, failed factorization).
    #[error("model validation failed: {0}")]
    Model(String),

    /// Volume constraints violate one or more invariants.
    #[error("invalid volume constraints: {}", .0.join("; "))]
    Constraints(Vec<String>),

    /// A cumulative volume outside the attainable set at some date.
    #[error("volume {level} is not attainable at date {date}")]
    Domain { date: usize, level: i64 },

    /// A decision was requested where the policy has no rule.
    #[error("policy undefined at date {date}, volume {level}")]
    PolicyUndefined { date: usize, level: i64 },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value in {layer}")]
    Numeric { layer: String },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(String),
}
