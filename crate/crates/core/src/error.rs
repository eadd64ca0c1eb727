use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point has non-positive depth z = {0}")]
    NonPositiveDepth(f64),
    #[error("measurement has non-positive disparity d = {0}")]
    NonPositiveDisparity(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("corrupt dataset at {path}: {reason}")]
    CorruptDataset { path: PathBuf, reason: String },
    #[error("bad geometry: {0}")]
    BadGeometry(String),
    #[error("sequence too short: {len} frames, need at least {needed}")]
    SequenceTooShort { len: usize, needed: usize },
    #[error("missing VO edge for experience {experience}, frame {frame}")]
    MissingVo { experience: u32, frame: usize },
    #[error("no path between experiences {src} and {dst}")]
    NoPath { src: u32, dst: u32 },
    #[error("no usable correspondences to sample from")]
    EmptyCorrespondences,
    #[error("coordinate ({u}, {v}) outside a {width}x{height} map")]
    OutOfBounds { u: f64, v: f64, width: usize, height: usize },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("no consensus: best inlier set has {0} pairs")]
    NoConsensus(usize),
    #[error("too few keypoints with valid depth: {0}")]
    TooFewValidDepths(usize),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("edge {query}->{reference}: {source}")]
    Edge {
        query: u32,
        reference: u32,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptDataset {
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
}
