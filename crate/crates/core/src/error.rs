use std::path::PathBuf;

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum SalError {
    #[error("dataset not found: {0}")]
    DatasetNotFound(PathBuf),

    #[error("corrupt format: {0}")]
    CorruptFormat(String),

    #[error("unsupported pipeline version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("invalid class index {index} for {num_classes} classes")]
    InvalidClass { index: usize, num_classes: usize },

    #[error("invalid kernel size {0} (must be odd)")]
    InvalidKernel(usize),

    #[error("input too small: {0}")]
    TooSmall(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("model not fitted: {0}")]
    NotFitted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SalError>;
