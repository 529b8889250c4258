use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] oneshot_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{0}")]
    Persistence(String),
    #[error("training diverged at step {step}: {message} (last good checkpoint: {})", checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string()))]
    Diverged {
        step: usize,
        message: String,
        checkpoint: Option<PathBuf>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}

pub(crate) fn format_err(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.into(),
        message: message.to_string(),
    }
}
