use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] tmlp_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    #[error("experiment {name} failed: {source}")]
    Experiment { name: String, source: Box<Error> },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status: 1 for failures inside an experiment, 2 for
    /// configuration, IO and input-format problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Experiment { .. } | Error::Core(_) => 1,
            Error::Io { .. } | Error::Config(_) | Error::Format(_) => 2,
        }
    }
}
