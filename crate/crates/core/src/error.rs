use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} outside 1..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("weight table has zero total mass")]
    ZeroWeights,

    #[error("weight table is not a sampling distribution")]
    WrongTableMode,

    #[error("delta queue holds {len} sweeps, need at least 2")]
    QueueTooSmall { len: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::TimestepOutOfRange { .. } => "timestep_out_of_range",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::Domain(_) => "domain",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::ZeroWeights => "zero_weights",
            Error::WrongTableMode => "wrong_table_mode",
            Error::QueueTooSmall { .. } => "queue_too_small",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
