use thiserror::Error;

#[derive(Debug, Error)]
pub enum OccError {
    #[error("voxel {coord:?} outside grid of dims {dims:?}")]
    IndexOutOfRange { coord: [usize; 3], dims: [usize; 3] },

    #[error("spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("truncated or oversized payload: expected {expected} bytes, found {found}")]
    Length { expected: u64, found: u64 },

    #[error("validation error at voxel {voxel}: {reason}")]
    Validation { voxel: usize, reason: String },

    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl OccError {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        OccError::Invalid {
            what,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, OccError>;
