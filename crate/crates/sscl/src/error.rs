use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("matrix has no non-zero singular values")]
    DegenerateMatrix,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("train-mode forward needs a batch of at least two samples")]
    TrainModeSingleSample,
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty pair set")]
    EmptyPairSet,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("memory holds no exemplar of class {0}")]
    MissingClass(u8),
    #[error("memory is empty")]
    EmptyMemory,
    #[error("task {0} already stored")]
    DuplicateTask(usize),
    #[error("delay queue clock moved backwards: {last} -> {got}")]
    NonMonotonicClock { last: usize, got: usize },
    #[error("batch has no positive sample for the requested class")]
    NoPositives,
    #[error("metric series needs at least two values, got {0}")]
    SeriesTooShort(usize),
    #[error("batch needs at least one positive and one negative")]
    DegenerateBatch,
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("line {line}: non-numeric feature in column `{column}`")]
    NonNumericFeature { line: usize, column: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("task {0} has no samples")]
    EmptyTask(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("config line {line}: field `{field}`: {reason}")]
    ConfigParse {
        line: usize,
        field: String,
        reason: String,
    },
    #[error("dataset not found: {}", .0.display())]
    DatasetMissing(PathBuf),
    #[error("no metrics.csv in {}", .0.display())]
    MissingMetrics(PathBuf),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
