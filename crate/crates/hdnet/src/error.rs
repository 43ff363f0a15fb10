use std::io;
use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A config value failed to parse or validate. `field` is a dotted path
    /// such as `model.channels_per_level[1]`.
    #[error("invalid config {file}: {field}: {message}")]
    Config { file: String, field: String, message: String },
    #[error("missing file {}", .0.display())]
    Missing(PathBuf),
    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Core(hdnet_core::Error),
}

impl Error {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Missing(_) => 3,
            Error::Diverged { .. } => 4,
            _ => 1,
        }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), message: message.into() }
    }

    /// Attributes a core configuration error to a section of a config file.
    pub(crate) fn in_section(file: &Path, section: &str, err: hdnet_core::Error) -> Self {
        match err {
            hdnet_core::Error::Config { field, reason } => {
                Error::Config { file: file.display().to_string(), field: format!("{section}.{field}"), message: reason }
            }
            other => other.into(),
        }
    }
}

impl From<hdnet_core::Error> for Error {
    fn from(err: hdnet_core::Error) -> Self {
        match err {
            hdnet_core::Error::Diverged { epoch, step } => Error::Diverged { epoch, step },
            hdnet_core::Error::Config { field, reason } => {
                Error::Config { file: "<arguments>".into(), field: field.into(), message: reason }
            }
            other => Error::Core(other),
        }
    }
}

/// Maps an IO error on `path`, turning "not found" into [`Error::Missing`].
pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::NotFound {
            Error::Missing(path.to_path_buf())
        } else {
            Error::Io { path: path.to_path_buf(), source }
        }
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

pub(crate) fn read_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

pub(crate) fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}
