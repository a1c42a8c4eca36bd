use thiserror::Error;

/// Errors raised anywhere in the workbench.
#[derive(Debug, Error)]
pub enum CluError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported operation: {0}")]
    Capability(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("sample {0} is already present in the buffer")]
    DuplicateSample(u64),
    #[error("memory buffer holds no remaining data")]
    EmptyBuffer,
    #[error("matrix is singular or ill-conditioned (condition number {condition:.3e})")]
    Singular { condition: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("task {index}: {source}")]
    Task {
        index: usize,
        #[source]
        source: Box<CluError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CluError>;

impl CluError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CluError::Shape(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        CluError::Validation(msg.into())
    }

    pub(crate) fn at_task(self, index: usize) -> Self {
        match self {
            CluError::Task { .. } => self,
            other => CluError::Task {
                index,
                source: Box::new(other),
            },
        }
    }
}
