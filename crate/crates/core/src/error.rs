use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::autodiff::{OpKind, ParamId};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not match buffer of length {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero dimension")]
    ZeroDimension(Vec<usize>),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("rows have different lengths")]
    RaggedRows,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op:?}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: OpKind,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{0:?} produced a non-finite value")]
    NonFinite(OpKind),
    #[error("backward requires a single-element loss")]
    NotScalar,
    #[error("node does not belong to this tape")]
    DetachedNode,
    #[error("parameter {0:?} registered twice")]
    DuplicateParam(ParamId),
    #[error("op expects {expected} inputs, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("invalid class index {0}")]
    BadClassIndex(f64),
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("unknown task {0}")]
    UnknownTask(usize),
    #[error("task {task}: batch shape mismatch ({detail})")]
    ShapeMismatch { task: usize, detail: String },
    #[error("direction is missing parameter {0:?}")]
    MissingDirection(ParamId),
    #[error("expected {expected} task weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("relatedness plan is infeasible: {0}")]
    InfeasiblePlan(String),
    #[error("invalid relatedness plan: {0}")]
    InvalidPlan(String),
    #[error("pool has {available} samples, {requested} requested")]
    PoolExhausted { requested: usize, available: usize },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("non-numeric cell at row {row}, column {column}")]
    NonNumericCell { row: usize, column: String },
    #[error("primary task set is empty")]
    EmptyPrimarySet,
    #[error("unknown task {0}")]
    UnknownTask(usize),
    #[error("invalid family: {0}")]
    InvalidFamily(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum WeightingError {
    #[error("primary task set is empty")]
    EmptyPrimarySet,
    #[error("cannot sample {sample} of {tasks} tasks")]
    BadSize { tasks: usize, sample: usize },
    #[error("task {task} has zero loss in the DWA history")]
    ZeroLoss { task: usize },
    #[error("invalid weighting configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

impl From<AutodiffError> for WeightingError {
    fn from(e: AutodiffError) -> Self {
        WeightingError::Network(NetworkError::Autodiff(e))
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("baseline metric of task {task} is zero")]
    ZeroBaseline { task: usize },
    #[error("metric tables are not aligned: {0}")]
    Misaligned(String),
    #[error("search needs {required} trainings, cap is {cap}")]
    BudgetExceeded { required: usize, cap: usize },
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at step {step}")]
    Divergence { step: usize, task: Option<usize> },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Weighting(#[from] WeightingError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Network(NetworkError::Autodiff(e))
    }
}
