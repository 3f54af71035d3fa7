use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("unexpected column `{0}`")]
    UnexpectedColumn(String),

    #[error("unparseable timestamp `{value}` on line {line}")]
    UnparseableTimestamp { value: String, line: usize },

    #[error("unparseable value `{value}` in column `{column}` on line {line}")]
    UnparseableValue {
        value: String,
        column: String,
        line: usize,
    },

    #[error("duplicate timestamp {timestamp} (grid {grid:?})")]
    DuplicateTimestamp {
        timestamp: String,
        grid: Option<String>,
    },

    #[error("file holds {0} grids; load it with `load_grids`")]
    MultipleGrids(usize),

    #[error("invalid table: {0}")]
    InvalidTable(String),

    #[error("aggregation left no rows")]
    EmptyAfterAggregation,

    #[error("snow albedo {value} out of [0, 1] at row {row}")]
    AlbedoOutOfRange { value: f64, row: usize },

    #[error("every value of feature `{feature}` in year {year} lies outside the IQR fences")]
    AllOutliers { feature: String, year: i32 },

    #[error("series of length {len} is shorter than window {window}")]
    SeriesTooShort { len: usize, window: usize },

    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },

    #[error("k = {k} outside the valid range [{min}, {max}]")]
    KOutOfRange { k: usize, min: usize, max: usize },

    #[error("silhouette needs at least two clusters")]
    SingleCluster,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("cluster {0} is empty")]
    EmptyCluster(usize),

    #[error("threshold window {window} invalid for series of length {len}")]
    WindowTooLarge { window: usize, len: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("feature index {index} out of range for {features} features")]
    IndexOutOfRange { index: usize, features: usize },

    #[error("model and data disagree: {0}")]
    ModelDataMismatch(String),

    #[error("labels contain a single class")]
    DegenerateLabels,

    #[error("training split contains a single class")]
    SingleClassTraining,

    #[error("need at least two observations per sample and non-zero variance")]
    TooFewSamples,

    #[error("no input to aggregate")]
    EmptyInput,

    #[error("ranking names unknown feature `{0}`")]
    UnknownFeatureInRanking(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFiniteLoss { .. } => ErrorClass::Numerical,
            Error::Io { .. } => ErrorClass::Io,
            Error::Csv(e) if e.is_io_error() => ErrorClass::Io,
            _ => ErrorClass::Validation,
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingColumn(_) => "MissingColumn",
            Error::UnexpectedColumn(_) => "UnexpectedColumn",
            Error::UnparseableTimestamp { .. } => "UnparseableTimestamp",
            Error::UnparseableValue { .. } => "UnparseableValue",
            Error::DuplicateTimestamp { .. } => "DuplicateTimestamp",
            Error::MultipleGrids(_) => "MultipleGrids",
            Error::InvalidTable(_) => "InvalidTable",
            Error::EmptyAfterAggregation => "EmptyAfterAggregation",
            Error::AlbedoOutOfRange { .. } => "AlbedoOutOfRange",
            Error::AllOutliers { .. } => "AllOutliers",
            Error::SeriesTooShort { .. } => "SeriesTooShort",
            Error::TooFewRows { .. } => "TooFewRows",
            Error::KOutOfRange { .. } => "KOutOfRange",
            Error::SingleCluster => "SingleCluster",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::UnknownParam(_) => "UnknownParam",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::EmptyCluster(_) => "EmptyCluster",
            Error::WindowTooLarge { .. } => "WindowTooLarge",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::ModelDataMismatch(_) => "ModelDataMismatch",
            Error::DegenerateLabels => "DegenerateLabels",
            Error::SingleClassTraining => "SingleClassTraining",
            Error::TooFewSamples => "TooFewSamples",
            Error::EmptyInput => "EmptyInput",
            Error::UnknownFeatureInRanking(_) => "UnknownFeatureInRanking",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::UnsupportedVersion(_) => "UnsupportedVersion",
            Error::Io { .. } => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }
}
