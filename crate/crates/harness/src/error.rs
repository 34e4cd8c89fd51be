use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("training aborted: {0}")]
    Divergence(String),
    #[error(transparent)]
    Base(#[from] dbf_base::Error),
    #[error(transparent)]
    Dbf(#[from] dbf_core::DbfError),
    #[error(transparent)]
    Nn(#[from] dbf_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Process exit codes of the `dbf` binary.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const DIVERGENCE: i32 = 4;
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        use dbf_core::DbfError;
        match self {
            HarnessError::Config(_) | HarnessError::Json(_) => exit::CONFIG,
            HarnessError::Divergence(_) => exit::DIVERGENCE,
            HarnessError::Dbf(DbfError::Divergence { .. }) => exit::DIVERGENCE,
            HarnessError::Dbf(DbfError::Nn(dbf_nn::NnError::Divergence { .. })) => exit::DIVERGENCE,
            HarnessError::Nn(dbf_nn::NnError::Divergence { .. }) => exit::DIVERGENCE,
            HarnessError::Dbf(DbfError::Config(_) | DbfError::Json(_)) => exit::CONFIG,
            HarnessError::Base(dbf_base::Error::Config(_)) => exit::CONFIG,
            HarnessError::Dbf(e) if e.is_numerical() => exit::NUMERICAL,
            HarnessError::Base(e) if e.is_numerical() => exit::NUMERICAL,
            HarnessError::Metric(_) => exit::NUMERICAL,
            _ => exit::OTHER,
        }
    }

    /// Short machine-readable kind for failure reports.
    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            exit::CONFIG => "config",
            exit::NUMERICAL => "numerical",
            exit::DIVERGENCE => "divergence",
            _ => "other",
        }
    }
}
