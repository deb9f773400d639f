use thiserror::Error;

pub type Result<T, E = GrinError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GrinError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{location}: {message}")]
    Ingestion { location: String, message: String },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("nothing to evaluate: {0}")]
    NothingToEvaluate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GrinError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        GrinError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn ingest(location: impl Into<String>, message: impl Into<String>) -> Self {
        GrinError::Ingestion {
            location: location.into(),
            message: message.into(),
        }
    }
}
