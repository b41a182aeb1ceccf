use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto stable exit codes:
/// usage/config -> 1, data -> 2, numerical -> 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("simulator error: {0}")]
    Sim(String),

    #[error("numerical abort: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable exit code contract for scripting.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Shape(_) | Error::Data(_) | Error::Sim(_) | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}
