use thiserror::Error;

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op} along {axis}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("divergence: non-finite gradient for parameter `{param}`")]
    Divergence { param: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check(op: &'static str, axis: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(NnError::Shape {
            op,
            axis,
            expected,
            got,
        })
    }
}
