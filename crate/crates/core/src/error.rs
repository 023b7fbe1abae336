use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the completion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0} (only 255 is accepted)")]
    UnsupportedMaxval(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("negative depth {value} at index {index}")]
    NegativeDepth { index: usize, value: f32 },
    #[error("non-finite depth at index {index}")]
    NonFiniteDepth { index: usize },
    #[error("i/o failure on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("crop rectangle {x},{y} {w}x{h} exceeds image {width}x{height}")]
    CropOutOfBounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
    #[error("dimension too small: {0}")]
    DimensionTooSmall(String),
    #[error("not enough valid depth: requested {requested}, available {available}")]
    NotEnoughValidDepth { requested: usize, available: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("odd spatial dimension {rows}x{cols}; downsampling needs even sizes")]
    OddDimension { rows: usize, cols: usize },
    #[error("loss node is not scalar ({rows}x{cols}x{channels})")]
    NonScalarLoss {
        rows: usize,
        cols: usize,
        channels: usize,
    },
    #[error("covariance needs at least two channels, got {0}")]
    TooFewChannels(usize),
    #[error("regularizer must be positive, got {0}")]
    NonPositiveRegularizer(f64),
    #[error("matrix is not positive definite (min eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
    #[error("degenerate singular spectrum: {0}")]
    DegenerateSpectrum(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("{0} did not converge")]
    NoConvergence(String),
    #[error("no pixel has valid groundtruth")]
    NoValidPixels,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss diverged at iteration {iteration}")]
    DivergedLoss { iteration: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
