use thiserror::Error;

/// Errors raised by the debiasing library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },

    #[error("categorical bias attribute has {labels} labels but K = {k}")]
    KMismatch { k: usize, labels: usize },

    #[error("bins and weights disagree on K ({bins} vs {weights})")]
    WeightLength { bins: usize, weights: usize },

    #[error("invalid weight vector: {0}")]
    InvalidWeights(String),

    #[error("every row has zero sampling weight")]
    AllZeroWeightCoverage,

    #[error("exposure/click/dependence variable is not binary at row {row}")]
    NonBinaryVariables { row: usize },

    #[error("statistics network training diverged at epoch {epoch}")]
    DivergedTraining { epoch: usize },

    #[error("contingency counts are empty")]
    EmptyCounts,

    #[error("feature schema mismatch: expected {expected} inputs, got {got}")]
    SchemaMismatch { expected: usize, got: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("labels contain a single class; AUC is undefined")]
    DegenerateLabels,

    #[error("sample is empty")]
    EmptySample,

    #[error("kernel matrix is singular even with jitter {jitter:e}")]
    SingularKernel { jitter: f64 },

    #[error("objective returned non-finite values at every evaluated point")]
    ObjectiveAlwaysNonFinite,

    #[error("MAR histogram has zero mass at rating {rating} where MNAR mass is positive")]
    ZeroMarMass { rating: usize },

    #[error("every stratum is empty")]
    AllStrataEmpty,

    #[error("exposure calibration failed: reached mean {reached:.4} for budget {target:.4}")]
    CalibrationFailed { target: f64, reached: f64 },

    #[error("shape mismatch in {file}: expected {expected}, found {found}")]
    ShapeMismatch {
        file: String,
        expected: String,
        found: String,
    },

    #[error("rating {value} out of range at {file}:{line}")]
    RatingOutOfRange { file: String, line: usize, value: i64 },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric value `{value}` in feature column `{column}` (row {row})")]
    NonNumericFeature {
        column: String,
        row: usize,
        value: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset failed validation: {0}")]
    InvalidDataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
