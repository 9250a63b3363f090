use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss {value} at iteration {iteration}")]
    NonFinite { iteration: u64, value: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Core(#[from] dynreg_core::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DataError {
    #[error("bad magic 0x{found:08x} at byte 0 (expected 0x{expected:08x})")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated payload: need {needed} bytes at byte offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at byte offset {offset} out of range")]
    BadLabel { label: u8, offset: usize },
    #[error("{0}")]
    Invalid(String),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::NonFinite { .. } => 3,
            LabError::Core(dynreg_core::Error::NonFinite { .. }) => 3,
            LabError::Core(_) => 2,
            LabError::Io { .. } | LabError::Data(_) => 4,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
