use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding an IDX container.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated payload: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("unsupported dimensions: {0}")]
    Dimensions(String),
}

/// Failures while decoding one of the crate's own file formats.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("{format}: {message}")]
pub struct FormatError {
    pub format: &'static str,
    pub message: String,
}

impl FormatError {
    pub fn new(format: &'static str, message: impl Into<String>) -> Self {
        Self {
            format,
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at sample {sample}")]
    NonFiniteLoss { sample: usize },
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("block-isotropic init needs s*eps/(1-s) < 1, got {0}")]
    BlockIsotropic(f64),
    #[error("infinite KL at weight {index}: posterior keep probability {posterior} outside prior support {prior}")]
    InfiniteKl {
        index: usize,
        posterior: f64,
        prior: f64,
    },
    #[error("singular configuration: {0}")]
    Singular(String),
    #[error("access to the held-out split from a prior-only stage")]
    SplitAccess,
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
