use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace `{0}` has no API calls")]
    EmptyTrace(String),
    #[error("sequence length {len} exceeds model capacity {max}")]
    CapacityExceeded { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("row {0} has no real tokens")]
    AllPadRow(usize),
    #[error("{0} is empty")]
    EmptyInput(&'static str),
    #[error("training data contains a single class")]
    SingleClass,
    #[error("class {label} has {count} traces, at least 2 required")]
    InsufficientClass { label: &'static str, count: usize },
    #[error("vocabulary hash mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("unsupported artifact format: expected `{expected}`, found `{found}`")]
    FormatVersion { expected: String, found: String },
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors caused by pairing artifacts that were not built together.
    pub fn is_compatibility(&self) -> bool {
        matches!(
            self,
            Error::VocabMismatch { .. } | Error::FormatVersion { .. }
        )
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
