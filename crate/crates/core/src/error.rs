use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("range error: {0}")]
    Range(String),

    #[error("malformed digit {digit} at position {position} (base {base})")]
    MalformedDigit {
        digit: usize,
        position: usize,
        base: usize,
    },

    #[error("length error: expected {expected} digits, got {got}")]
    Length { expected: usize, got: usize },

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("state error: {0}")]
    State(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Range(_) => "range",
            Error::MalformedDigit { .. } => "malformed_digit",
            Error::Length { .. } => "length",
            Error::Capacity(_) => "capacity",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::State(_) => "state",
            Error::Argument(_) => "argument",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
