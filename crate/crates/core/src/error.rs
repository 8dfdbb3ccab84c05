use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("out-of-vocabulary token id {id} (vocab size {vocab_size})")]
    OutOfVocab { id: u32, vocab_size: usize },

    #[error("empty mask: at least one token must be masked")]
    EmptyMask,

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt archive {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("incomparable records: {0}")]
    Incomparable(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("plot error: {0}")]
    Plot(String),
}

impl Error {
    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
            Error::Csv(_) => "csv",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::OutOfVocab { .. } => "out_of_vocab",
            Error::EmptyMask => "empty_mask",
            Error::TooFewSamples { .. } => "too_few_samples",
            Error::NonFinite { .. } => "non_finite",
            Error::Version { .. } => "version",
            Error::Corrupt { .. } => "corrupt",
            Error::Dataset(_) => "dataset",
            Error::Incomparable(_) => "incomparable",
            Error::Registry(_) => "registry",
            Error::Plot(_) => "plot",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;
