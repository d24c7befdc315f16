use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("audio clip is empty")]
    EmptyClip,

    #[error("clip has {got} samples, at least {need} are required for one analysis window")]
    ClipTooShort { got: usize, need: usize },

    #[error("vocab_size {requested} is too small: at least {minimum} entries are needed for specials and alphabet")]
    VocabTooSmall { requested: usize, minimum: usize },

    #[error("token id {id} is out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("sequence length {len} exceeds the limit of {limit} ({what})")]
    TooLong { what: &'static str, len: usize, limit: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("no loss is present in the bundle")]
    NoLoss,

    #[error("bad {format} data at byte offset {offset}: {reason}")]
    Format {
        format: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("{format} record {index} is truncated or corrupt at byte offset {offset}")]
    Truncated {
        format: &'static str,
        index: usize,
        offset: u64,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("missing parameter array `{0}`")]
    MissingParam(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used for one-line machine-parsable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::EmptyClip => "empty_clip",
            Error::ClipTooShort { .. } => "clip_too_short",
            Error::VocabTooSmall { .. } => "vocab_too_small",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::TooLong { .. } => "too_long",
            Error::NonFinite(_) => "non_finite",
            Error::NoLoss => "no_loss",
            Error::Format { .. } => "format",
            Error::Truncated { .. } => "truncated",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::MissingParam(_) => "missing_param",
            Error::Config(_) => "config",
            Error::Io { .. } | Error::RawIo(_) => "io",
            Error::Wav(_) => "wav",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
