use std::path::PathBuf;

/// Every failure the lab can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("vector norm is zero; cannot normalize")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("attribute set is empty")]
    EmptyAttributeSet,
    #[error("image has no pixels")]
    EmptyImage,
    #[error("patch of side {side} does not fit a {width}x{height} image")]
    PatchOutOfBounds { side: usize, width: usize, height: usize },
    #[error("query has no tokens")]
    EmptyQuery,
    #[error("training data contains a single class")]
    SingleClassData,
    #[error("classifier has not been trained")]
    UntrainedClassifier,
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token sequence is empty")]
    EmptyTokens,
    #[error("cache was produced by parameter generation {cache}, model is at {model}")]
    StaleCache { cache: u64, model: u64 },
    #[error("text {row} is not included in any image of the batch")]
    NoInclusionRow { row: usize },
    #[error("caption {row} carries no mask token")]
    NoMaskPresent { row: usize },
    #[error("every anchor was skipped; nothing to score")]
    EmptyBatch,
    #[error("dataset task {dataset} does not match configured task {config}")]
    TaskDatasetMismatch { config: String, dataset: String },
    #[error("loss diverged (non-finite) at epoch {epoch}: {what}")]
    DivergedLoss { epoch: usize, what: String },
    #[error("corrupt checkpoint at {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("query {0} has no ground-truth ids")]
    MissingGroundTruth(String),
    #[error("query {0} was not routed")]
    UnroutedQuery(String),
    #[error("runs are not comparable: {0}")]
    IncomparableRuns(String),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dims(expected: impl std::fmt::Display, actual: impl std::fmt::Display) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
