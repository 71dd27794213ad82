//! Library half of the command-line tool: embedding CSV interchange, the
//! drift-audit pipeline, dataset synthesis to disk, and the run-report
//! writers. The binary in `main.rs` is a thin clap shell over this.

pub mod audit;
pub mod embedding;
pub mod synth;

use std::path::{Path, PathBuf};
use thiserror::Error;

/// Process exit codes: 2 config/usage, 3 parse/data, 4 numeric failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Usage,
    Data,
    Numeric,
}

impl ExitClass {
    pub fn code(self) -> u8 {
        match self {
            ExitClass::Usage => 2,
            ExitClass::Data => 3,
            ExitClass::Numeric => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("id mismatch between inputs: `{id}` has no counterpart")]
    IdMismatch { id: String },
    #[error("dimension mismatch: {left} vs {right} feature columns")]
    DimMismatch { left: usize, right: usize },
    #[error("{0}")]
    Usage(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] gramtune_core::trainer::TrainError),
    #[error(transparent)]
    Data(#[from] gramtune_core::data::DataError),
    #[error(transparent)]
    Linalg(#[from] gramtune_core::linalg::LinalgError),
    #[error(transparent)]
    Gw(#[from] gramtune_core::gw::GwError),
    #[error(transparent)]
    Encoder(#[from] gramtune_core::encoder::EncoderError),
}

impl CliError {
    pub fn exit_class(&self) -> ExitClass {
        use gramtune_core::trainer::TrainError;
        match self {
            CliError::Parse { .. } | CliError::IdMismatch { .. } | CliError::DimMismatch { .. } => {
                ExitClass::Data
            }
            CliError::Usage(_) | CliError::Data(_) => ExitClass::Usage,
            CliError::Io { .. } => ExitClass::Data,
            CliError::Train(e) => match e {
                TrainError::MissingKey(_)
                | TrainError::BadValue { .. }
                | TrainError::UnknownKey(_)
                | TrainError::TooFewClasses
                | TrainError::InsufficientSamples { .. } => ExitClass::Usage,
                TrainError::BadLine { .. } => ExitClass::Data,
                _ => ExitClass::Numeric,
            },
            // Oversized exact enumeration is a usage problem (subsample);
            // the rest of the numeric stack is a numeric failure.
            CliError::Gw(gramtune_core::gw::GwError::TooLarge { .. }) => ExitClass::Usage,
            CliError::Linalg(_) | CliError::Gw(_) | CliError::Encoder(_) => ExitClass::Numeric,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Write a file atomically: temp sibling, then rename over the target.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    std::fs::write(&tmp, contents).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))?;
    Ok(())
}
