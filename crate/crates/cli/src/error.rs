use std::path::{Path, PathBuf};

use lowalt_core::channel::ChannelError;
use lowalt_core::imaging::ImagingError;
use lowalt_core::learning::LearningError;
use lowalt_core::scene::SceneError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// JSON that does not match the schema; `key` is the path of the offending key.
    #[error("schema error at `{key}`: {message}")]
    Schema { key: String, message: String },
    /// Well-formed JSON with an out-of-range value.
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Learning(#[from] LearningError),
    #[error("{failed} of {total} trials failed (more than 10%)")]
    TooManyFailures { failed: usize, total: usize },
    #[error("run directory {} was created for config {found}, not {expected}", path.display())]
    ConfigMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn invalid(key: &str, message: impl std::fmt::Display) -> Self {
        CliError::Invalid {
            key: key.to_string(),
            message: message.to_string(),
        }
    }

    pub fn format(path: &Path, message: impl std::fmt::Display) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }
}
