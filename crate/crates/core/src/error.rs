use thiserror::Error;

pub type Result<T, E = MpcaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MpcaError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    /// The asymptotic formulas cannot be evaluated for this coordinate
    /// (nonpositive signal variance, negative quarter inner product, ...).
    #[error("inference unavailable: {0}")]
    InferenceUnavailable(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MpcaError {
    /// True for user-facing configuration and input problems, false for
    /// numerical failures.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            MpcaError::InvalidInput(_)
                | MpcaError::Config(_)
                | MpcaError::DimensionMismatch(_)
                | MpcaError::Io(_)
                | MpcaError::Csv(_)
                | MpcaError::Json(_)
        )
    }
}
