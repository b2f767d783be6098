use thiserror::Error;

/// Errors surfaced by the editing stack.
///
/// The variants are coarse on purpose: the CLI maps each class to a distinct
/// exit code, and tests assert on the class rather than the message.
#[derive(Error, Debug)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("sequence too long: {0}")]
    Truncation(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("solver diverged: {0}")]
    SolverDivergence(String),
    #[error("degenerate key: {0}")]
    DegenerateKey(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
