use std::io;
use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    /// Malformed binary or text content; `offset` counts bytes from the
    /// start of the file.
    #[error("{}: byte {offset}: {msg}", path.display())]
    Parse { path: PathBuf, offset: usize, msg: String },
    #[error("{}:{line}: {msg}", path.display())]
    Syntax { path: PathBuf, line: usize, msg: String },
    /// A well-formed value that is not acceptable for the named field.
    #[error("{field}: {msg}")]
    Config { field: String, msg: String },
    #[error(transparent)]
    Core(#[from] fusenet_core::Error),
}

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// Process exit status: 2 for IO and parse failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::Syntax { .. } => 2,
            Error::Config { .. } | Error::Core(_) => 1,
        }
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
