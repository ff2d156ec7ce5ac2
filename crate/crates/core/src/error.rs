use std::path::PathBuf;

/// Errors produced by the lesion-graph library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("degenerate diameter measurement: all endpoints coincide")]
    DegenerateMeasurement,

    #[error("invalid diameter measurement: {0}")]
    InvalidMeasurement(String),

    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{path}: row {row}: {message}")]
    BadRow {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("duplicate lesion_id {0}")]
    DuplicateLesion(u64),

    #[error("feature join mismatch: {0}")]
    FeatureJoin(String),

    #[error("cue normalization failed: dimension `{0}` has a non-positive maximum")]
    NonPositiveMaximum(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sampler starved: no candidate for slot {slot} after {redraws} anchor redraws")]
    SamplerStarved { slot: char, redraws: usize },

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("no feasible equidistant slice set: volume of {len} slices, {m} requested")]
    InfeasibleSliceSet { len: usize, m: usize },

    #[error("score normalization failed: scores are constant")]
    ConstantScores,

    #[error("class {0} has no seed samples")]
    EmptySeedClass(u8),

    #[error("classifier diverged (final gradient norm {0})")]
    Diverged(f64),

    #[error("retrieval depth {k} out of range (at most {available} candidates)")]
    RetrievalDepth { k: usize, available: usize },

    #[error("lesions from more than one patient passed to matching ({0} and {1})")]
    MixedPatients(u64, u64),

    #[error("lesion universes differ between predicted and truth groupings")]
    UniverseMismatch,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown lesion_id {0}")]
    UnknownLesion(u64),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (files, configuration,
    /// arguments) as opposed to failures while running an algorithm.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. }
                | Error::DegenerateMeasurement
                | Error::InvalidMeasurement(_)
                | Error::MissingColumn { .. }
                | Error::BadRow { .. }
                | Error::DuplicateLesion(_)
                | Error::FeatureJoin(_)
                | Error::Config(_)
                | Error::RetrievalDepth { .. }
                | Error::MixedPatients(..)
                | Error::UniverseMismatch
                | Error::UnknownLesion(_)
                | Error::Checkpoint(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
