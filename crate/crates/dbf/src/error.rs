use thiserror::Error;

pub type Result<T> = std::result::Result<T, DbfError>;

#[derive(Debug, Error)]
pub enum DbfError {
    #[error(transparent)]
    Base(#[from] dbf_base::Error),

    #[error(transparent)]
    Nn(#[from] dbf_nn::NnError),

    #[error("von Mises concentration must be ≥ 0, got {0}")]
    NegativeConcentration(f64),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DbfError {
    /// Errors that come from the numerics (indefinite precision, collapse, …)
    /// rather than from bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            DbfError::Base(e) => e.is_numerical(),
            DbfError::Nn(dbf_nn::NnError::Divergence { .. }) => true,
            DbfError::Divergence { .. } => true,
            _ => false,
        }
    }
}
