use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    /// Training diverged. Carries enough context to locate the failing step.
    #[error("non-finite loss at round {round}, peer {peer}, batch {batch}: {detail}")]
    NonFinite {
        round: usize,
        peer: usize,
        batch: usize,
        detail: String,
    },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
