use thiserror::Error;

/// Errors raised by the range coder.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoderError {
    #[error("symbol {symbol} outside the CDF support of {alphabet} symbols")]
    SymbolOutOfRange { symbol: usize, alphabet: usize },
    #[error("symbol {0} has zero probability mass")]
    ZeroMass(usize),
    #[error("stream truncated")]
    Truncated,
    #[error("stream corrupt")]
    Corrupt,
    #[error("malformed CDF: {0}")]
    MalformedCdf(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported stream version {0}")]
    UnsupportedVersion(u8),
    #[error("length overrun: {0}")]
    LengthOverrun(String),
    #[error("payload checksum mismatch")]
    ChecksumMismatch,
    #[error("entropy coder: {0}")]
    Coder(#[from] CoderError),
    #[error("component mismatch: {0}")]
    ComponentMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Validation,
    Internal,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io(_) | Error::Image(_) => ErrorClass::Io,
            Error::Csv(e) if e.is_io_error() => ErrorClass::Io,
            Error::Tensor(_) | Error::NonFinite(_) => ErrorClass::Internal,
            _ => ErrorClass::Validation,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
