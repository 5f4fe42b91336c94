use thiserror::Error;

use crate::types::PassengerId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid config: `{field}` {reason}")]
    InvalidConfig {
        field: &'static str,
        reason: &'static str,
    },
    #[error("invalid route spec: `{field}` {reason}")]
    InvalidSpec {
        field: &'static str,
        reason: &'static str,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid image: {0}")]
    InvalidImage(&'static str),
    #[error("invalid log-map bounds: min must be < max and k > 0")]
    InvalidBounds,
    #[error("trajectory needs at least two points")]
    EmptyTrajectory,
    #[error("trajectory timestamps must be strictly increasing")]
    NonMonotoneTimestamps,
    #[error("invalid ROI: {0}")]
    InvalidRoi(&'static str),
    #[error("observation has no pixel data (frame {frame}, part {part})")]
    MissingImage { frame: usize, part: usize },
    #[error("observation has no embedding (frame {frame}, part {part})")]
    MissingEmbedding { frame: usize, part: usize },
    #[error("tracklet has no frames")]
    EmptyTracklet,
    #[error("duplicate id {0}")]
    DuplicateId(PassengerId),
    #[error("unknown id {0}")]
    UnknownId(PassengerId),
    #[error("search result is empty")]
    EmptyResult,
    #[error("gallery is empty while matching query {0}")]
    EmptyGallery(PassengerId),
    #[error("stop events out of order at stop {0}")]
    StopOrder(u32),
    #[error("non-finite value in feature vector")]
    NonFinite,
    #[error("corrupt snapshot: {0}")]
    Snapshot(&'static str),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
