use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not symmetric (max relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("posterior precision not positive definite (block/pivot {pivot})")]
    PosteriorPrecisionNotPd { pivot: usize },

    #[error("virtual prior dominates: posterior precision has min eigenvalue {min_eigenvalue:e}")]
    VirtualPriorDominates { min_eigenvalue: f64 },

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("block storage requires an even dimension, got {0}")]
    OddDimension(usize),

    #[error("integration produced a non-finite derivative at substep {substep}")]
    Integration { substep: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ensemble has zero spread; gain cannot be formed")]
    ZeroSpread,

    #[error("particle collapse: all log-weights are -inf")]
    ParticleCollapse,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dims(what: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            what,
            expected,
            got,
        }
    }

    /// True for errors caused by the numbers rather than by the inputs' shape
    /// or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::PosteriorPrecisionNotPd { .. }
                | Error::VirtualPriorDominates { .. }
                | Error::Integration { .. }
                | Error::ZeroSpread
                | Error::ParticleCollapse
        )
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::dims(what, expected, got))
    }
}
