use std::path::{Path, PathBuf};

use hdmap_core::baselines::BaselineError;
use hdmap_core::formats::FormatError;
use hdmap_core::mapbuild::MapError;
use hdmap_core::optimize::OptimizeError;

/// Exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Invalid configuration, arguments or unusable paths.
pub const EXIT_CONFIG: i32 = 2;
/// An input file does not follow its format.
pub const EXIT_FORMAT: i32 = 3;
/// The optimizer failed numerically.
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => EXIT_CONFIG,
            CliError::Format { .. } => EXIT_FORMAT,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError::Config(message.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, source: FormatError) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<OptimizeError> for CliError {
    fn from(e: OptimizeError) -> Self {
        match e {
            OptimizeError::NumericalFailure { .. } | OptimizeError::NoProgress { .. } | OptimizeError::Ipm(_) => {
                CliError::Numerical(e.to_string())
            }
            OptimizeError::EmptyProblem
            | OptimizeError::MissingPrior(_)
            | OptimizeError::MissingModel(_)
            | OptimizeError::InvalidOptions(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<MapError> for CliError {
    fn from(e: MapError) -> Self {
        match e {
            MapError::Optimize(o) => o.into(),
            MapError::Ipm(_) => CliError::Numerical(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::Map(m) => m.into(),
            BaselineError::Ipm(_) => CliError::Numerical(e.to_string()),
            BaselineError::MissingCamera(_) | BaselineError::MissingModel(_) | BaselineError::Spec(_) => {
                CliError::Config(e.to_string())
            }
        }
    }
}
