use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("latent precision matrix is singular")]
    SingularPrecision,
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("empty data: {0}")]
    EmptyData(String),
    #[error("non-finite loss at {0}")]
    NonFiniteLoss(String),
    #[error("design pool is empty")]
    EmptyPool,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("all samples are equal; distribution is degenerate")]
    DegenerateSamples,
    #[error("sample {index} is not strictly positive ({value})")]
    NonPositiveSample { index: usize, value: f64 },
    #[error("mixture component variance must be positive")]
    NonPositiveVariance,
    #[error("row {row} is not a probability vector (sum {sum})")]
    InvalidSimplex { row: usize, sum: f64 },
    #[error("parse error at line {line}, column {column}: {message}")]
    ParseError {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("missing value at line {line}, column {column}")]
    MissingValue { line: usize, column: usize },
    #[error("file has no data rows")]
    EmptyFile,
    #[error("need at least 2 rows to split, got {0}")]
    TooFewRows(usize),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}

/// Attaches a pipeline stage label to an error.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}

impl Error {
    /// Outermost stage label, if the error went through [`StageExt::stage`].
    pub fn stage_name(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
