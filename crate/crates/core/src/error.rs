use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("vector norm {norm:e} is at or below the degeneracy floor")]
    DegenerateVector { norm: f64 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("activation cache does not belong to these parameters")]
    StaleCache,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("need {needed} identities, dataset has {available}")]
    InsufficientIdentities { needed: usize, available: usize },

    #[error("identity {identity} has {count} samples, need at least 2")]
    TooFewSamples { identity: usize, count: usize },

    #[error("non-finite loss at round {round}, client {client:?}, batch {batch}")]
    NonFiniteLoss {
        round: usize,
        client: Option<usize>,
        batch: usize,
    },

    #[error("no uploads to aggregate")]
    NoUploads,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("operating point {rate} not estimable from {count} negative scores")]
    NotEstimable { rate: f64, count: usize },

    #[error("k = {k} exceeds gallery size {gallery}")]
    KTooLarge { k: usize, gallery: usize },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("unknown metric `{0}`")]
    UnknownMetric(String),

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },

    #[error("malformed input: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}
