use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("expected a scalar tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape is frozen: backward already ran for this recording")]
    TapeFrozen,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("batch composition: {0}")]
    Sampler(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    /// Process exit status used by the command-line front end.
    ///
    /// 2 usage, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParam(_) | Error::Config(_) => 2,
            Error::NonFinite { .. } => 4,
            _ => 3,
        }
    }
}
