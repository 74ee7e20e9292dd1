use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid definition: {0}")]
    InvalidGrid(String),

    #[error("coordinate reference system mismatch: grid uses {expected}, input declares {found}")]
    CrsMismatch { expected: String, found: String },

    #[error("unknown tile id `{0}`")]
    UnknownTile(String),

    #[error("decision `{decision}` is not allowed for tile `{tile_id}`: {reason}")]
    InvalidDecision {
        tile_id: String,
        decision: String,
        reason: String,
    },

    #[error("region `{region}` has {available} labelled tiles, fewer than {n_folds} folds; use a lower fold count")]
    TooFewTiles {
        region: String,
        available: usize,
        n_folds: usize,
    },

    #[error("fold leakage: {0}")]
    Leakage(String),

    #[error("invalid fold specification: {0}")]
    InvalidFolds(String),

    #[error("chip window for tile `{tile_id}` is not readable: {reason}")]
    ChipWindow { tile_id: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("raster: {0}")]
    Raster(String),

    #[error("weights do not match architecture at layer `{layer}`: expected {expected:?}, found {found:?}")]
    WeightsMismatch {
        layer: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("corrupt weights file: {0}")]
    CorruptWeights(String),

    #[error("training diverged: {0}")]
    NonFiniteLoss(String),

    #[error("zero variance in dimension {0}; cannot standardize")]
    ZeroVariance(usize),

    #[error("missing features for tiles: {0:?}")]
    MissingFeatures(Vec<String>),

    #[error("model has not been fitted")]
    NotFitted,

    #[error("encoder has no single-output linear regression head")]
    NotLinearHead,

    #[error("duplicate tile id `{0}`")]
    DuplicateTile(String),

    #[error("rasters are not aligned: {0}")]
    Misaligned(String),

    #[error("quota of {requested} zero cells for region `{region}` exceeds the {available} available")]
    QuotaExceeded {
        region: String,
        requested: usize,
        available: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupt state in {path}: {reason}")]
    CorruptState { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Tiff(#[from] tiff::TiffError),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
