use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("joint index {index} out of range for {joint_count} joints")]
    IndexOutOfRange { index: usize, joint_count: usize },
    #[error("self-loop on joint {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("directed cycle through joint {0}")]
    DirectedCycle(usize),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("non-finite coordinate at joint {joint}")]
    NonFiniteCoordinate { joint: usize },
    #[error("zero-length bone ({0}, {1})")]
    ZeroLengthBone(usize, usize),
    #[error("negative edge weight between {0} and {1}")]
    NegativeWeight(usize, usize),
    #[error("graph is disconnected")]
    DisconnectedGraph,
    #[error("joint {0} has no neighbours")]
    IsolatedNode(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("backward called without a forward cache in {0}")]
    MissingCache(&'static str),
    #[error("temporal kernel {kernel} longer than sequence of {frames} frames")]
    KernelLargerThanSequence { kernel: usize, frames: usize },
    #[error("batch of {0} is too small for batch normalization in train mode")]
    BatchTooSmall(usize),
    #[error("streams disagree on class count ({0} vs {1})")]
    StreamClassMismatch(usize, usize),
    #[error("label {label} invalid for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("unknown template: {0}")]
    UnknownTemplate(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
