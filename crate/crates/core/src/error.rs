use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("loss must be a scalar node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected \"PRVF\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: expected {expected} bytes of payload, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("dimension mismatch vs header: {0}")]
    DimMismatch(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("training diverged at step {step}; last finite step was {last_finite:?}")]
    Diverged { step: usize, last_finite: Option<usize> },

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingInput(path);
        }
        Error::Io { path, source }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
