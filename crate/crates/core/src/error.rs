use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("all counts are zero in {0}")]
    AllZeroCounts(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{path}: {reason}")]
    InvalidParameter { path: String, reason: String },

    #[error("distribution has no scene types or no categories")]
    EmptyDistribution,

    #[error("could not place object {object} after {attempts} attempts")]
    PlacementFailure { object: usize, attempts: usize },

    #[error("unknown category id {0}")]
    UnknownCategory(usize),

    #[error("object {object} has {points} points, at least 2 are required")]
    DegenerateObject { object: usize, points: usize },

    #[error("requested {requested} points but only {available} are available")]
    TooFewPoints { requested: usize, available: usize },

    #[error("non-finite value in loss input")]
    NonFiniteInput,

    #[error("batch contains no instances")]
    EmptyBatch,

    #[error("point set is empty")]
    EmptySet,

    #[error("no pair manifests found in {0}")]
    EmptyDataset(PathBuf),

    #[error("corrupt manifest for pair {pair}: {reason}")]
    CorruptManifest { pair: String, reason: String },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error stems from bad user input rather than an
    /// internal failure. The CLI maps these to exit code 2.
    pub fn is_invalid_input(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::PlacementFailure { .. } | Error::NonFiniteInput => false,
            _ => true,
        }
    }
}
