use std::io;

/// Errors shared by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or vector lengths that should agree do not.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An input lies outside the domain of the operation (e.g. no instances).
    #[error("domain error: {0}")]
    Domain(String),
    /// Two inputs violate a structural pre-condition of an operation.
    #[error("contract error: {0}")]
    Contract(String),
    /// A serialized tensor or checkpoint could not be decoded.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(message: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(message.into()))
}

pub(crate) fn contract_err<T>(message: impl Into<String>) -> Result<T> {
    Err(Error::Contract(message.into()))
}
