use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor shape {shape:?} holds {expected} values but {actual} were given")]
    TensorSize {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("no gradient supplied for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("parameter `{name}` has shape {expected:?}, got {actual:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed graph file at line {line}, column {column}: {message}")]
    Malformed {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("edge {edge} references missing node {node}")]
    DanglingEdge { edge: usize, node: usize },

    #[error("unknown node {0}")]
    UnknownNode(usize),

    #[error("no embedding for relation {0}")]
    MissingRelation(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("class {class} has {available} labeled points in the {partition} partition, {needed} needed")]
    InsufficientPoints {
        class: usize,
        partition: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("invalid episode: {0}")]
    InvalidEpisode(String),

    #[error("edge weights are not set on the data graph")]
    UnsetWeights,

    #[error("non-finite loss {loss} at step {step} (episodes: {episodes})")]
    NonFiniteLoss {
        step: u64,
        loss: f64,
        episodes: String,
    },

    #[error("cannot evaluate an empty run")]
    EmptyRun,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
