use std::path::PathBuf;

use gpcs_core::data::DataError;
use gpcs_core::metrics::MetricsError;
use gpcs_core::sensing::SensingError;
use gpcs_core::solvers::SolverError;
use gpcs_core::training::TrainingError;
use gpcs_core::weights::WeightsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Weights {
        path: PathBuf,
        #[source]
        source: WeightsError,
    },
    #[error("missing input for this stage: {0}")]
    Dependency(String),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    /// 0 ok, 1 usage, 2 data/parse, 3 training divergence, 4 dependency.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) | CliError::Data(_) | CliError::Weights { .. } | CliError::Csv(_) => 2,
            CliError::Training(TrainingError::Divergence { .. }) => 3,
            CliError::Solver(SolverError::Diverged { .. } | SolverError::InnerDiverged { .. }) => 3,
            CliError::Dependency(_) => 4,
            CliError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 4,
            _ => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
