use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate box [{0}, {1}, {2}, {3}]")]
    DegenerateBox(f64, f64, f64, f64),
    #[error("record has no relationship votes (only unsure or none)")]
    EmptyVotes,
    #[error("unknown relationship class `{0}`")]
    UnknownClass(String),
    #[error("class `{0}` has zero annotations; cannot compute inverse-frequency weight")]
    ZeroCount(String),
    #[error("loss `{loss}` expects a {expected} target")]
    MismatchedTarget { loss: &'static str, expected: &'static str },
    #[error("region bag is empty")]
    EmptyBag,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("region lies outside the feature map")]
    RegionOutsideMap,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("split is empty")]
    EmptySplit,
    #[error("no positive samples for class")]
    NoPositives,
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no consistent records with the requested majority class")]
    NoRecords,
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged (non-finite loss) at epoch {0}")]
    DivergenceDetected(usize),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("missing split `{0}`")]
    MissingSplit(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
