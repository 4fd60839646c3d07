/// Errors from the command-line side: files, configuration and the core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] selfrect_core::Error),

    #[error("{0}")]
    Io(String),

    #[error("configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
