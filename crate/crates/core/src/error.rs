use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // volume and table ingestion
    #[error("malformed volume header: {0}")]
    MalformedHeader(String),
    #[error("truncated voxel payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("voxel count {found} does not match dims {dims:?}")]
    DimensionMismatch { dims: [usize; 3], found: usize },
    #[error("table {table}: missing column `{column}`")]
    MissingColumn { table: String, column: String },
    #[error("table {table}, row {row}: non-numeric value `{value}` in column `{column}`")]
    NonNumeric {
        table: String,
        row: usize,
        column: String,
        value: String,
    },
    #[error("table {table}, row {row}: unknown label `{value}`")]
    UnknownLabel {
        table: String,
        row: usize,
        value: String,
    },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("table parse error: {0}")]
    Table(String),

    // patches and folds
    #[error("candidate slice {k} lies outside the volume (nz = {nz})")]
    OutOfVolume { k: i64, nz: usize },
    #[error("need at least {needed} scans for {needed}-fold partitioning, got {got}")]
    TooFewScans { needed: usize, got: usize },

    // numerical engine
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called before a recorded forward pass")]
    NoForwardPass,

    // checkpoints
    #[error("checkpoint format mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    // training and categorization
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("every feature column is zero; nothing left to cluster")]
    DegenerateFeatures,
    #[error("cannot fit {k} clusters to {m} samples")]
    TooFewSamples { m: usize, k: usize },
    #[error("missing cluster assignments: {0}")]
    MissingAssignments(String),
    #[error("cluster count mismatch: {0}")]
    KMismatch(String),
    #[error(
        "training set must contain both classes ({positives} nodules, {negatives} non-nodules)"
    )]
    SingleClass { positives: usize, negatives: usize },
    #[error("ensemble has no members")]
    EmptyEnsemble,

    // evaluation
    #[error("total nodule count must be positive")]
    NoNodules,
    #[error("no scans to evaluate")]
    NoScans,
    #[error("candidate {0} has no probability")]
    MissingProbability(usize),

    // phantom
    #[error("could not place {what} inside the volume after {attempts} attempts")]
    PlacementFailed { what: String, attempts: usize },

    // pipeline
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing prerequisite artifact {path} (run `{command}` first)")]
    MissingArtifact { path: PathBuf, command: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Table(e.to_string())
    }
}
