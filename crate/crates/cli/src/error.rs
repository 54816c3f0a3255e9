use std::path::PathBuf;

use autolambda_core::{MetricError, NetworkError, TaskError, TrainError, WeightingError};
use thiserror::Error;

/// Everything a command can fail with, mapped onto process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("numerical divergence at step {step}{}", task_suffix(.task))]
    Divergence { step: usize, task: Option<usize> },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Train(TrainError),
    #[error("{0}")]
    Check(String),
}

fn task_suffix(task: &Option<usize>) -> String {
    task.map(|t| format!(" (task {t})")).unwrap_or_default()
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { step, task } => CliError::Divergence { step, task },
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Task(t) => CliError::Task(t),
            TrainError::Metric(m) => CliError::Metric(m),
            TrainError::Network(NetworkError::InvalidSpec(m)) => CliError::Config(m),
            TrainError::Weighting(
                w @ (WeightingError::InvalidConfig(_)
                | WeightingError::BadSize { .. }
                | WeightingError::EmptyPrimarySet),
            ) => CliError::Config(w.to_string()),
            other => CliError::Train(other),
        }
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for bad configuration, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Task(
                TaskError::InvalidPlan(_)
                | TaskError::InfeasiblePlan(_)
                | TaskError::InvalidFamily(_)
                | TaskError::SchemaMismatch(_)
                | TaskError::NonNumericCell { .. }
                | TaskError::EmptyPrimarySet
                | TaskError::UnknownTask(_),
            ) => 2,
            CliError::Metric(MetricError::BudgetExceeded { .. }) => 2,
            CliError::Divergence { .. } => 3,
            _ => 1,
        }
    }
}
