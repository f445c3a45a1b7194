use thiserror::Error;

pub type Result<T> = std::result::Result<T, HugError>;

#[derive(Debug, Error)]
pub enum HugError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("malformed container at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HugError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        HugError::Invalid(msg.into())
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        HugError::Domain {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, HugError::Numerical(_))
    }
}
