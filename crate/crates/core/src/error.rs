use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("graph contains a directed cycle through node {node}")]
    Cycle { node: usize },

    #[error("node index {index} out of range for a graph with {n_nodes} nodes")]
    NodeIndex { index: usize, n_nodes: usize },

    #[error("self-loop on node {0}")]
    SelfLoop(usize),

    #[error("invalid causal order: {0}")]
    InvalidOrder(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value encountered{}: {what}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NonFinite {
        what: String,
        iteration: Option<usize>,
    },

    #[error("factorization failed: matrix is not positive definite (pivot {pivot})")]
    Factorization { pivot: usize },

    #[error("feature count {features} exceeds the cap of {cap}")]
    FeatureCap { features: usize, cap: usize },

    #[error("column {0} is zero")]
    ZeroColumn(usize),

    #[error("row {0} of the true latents has zero norm")]
    ZeroNormRow(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("missing ground truth: {0}")]
    MissingTruth(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn non_finite(what: impl Into<String>) -> Self {
        Error::NonFinite {
            what: what.into(),
            iteration: None,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2 = configuration error, 3 = numeric failure, 4 = I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Cycle { .. }
            | Error::NodeIndex { .. }
            | Error::SelfLoop(_)
            | Error::InvalidOrder(_)
            | Error::Dimension(_)
            | Error::Config(_)
            | Error::FeatureCap { .. }
            | Error::Empty(_)
            | Error::MissingTruth(_) => 2,
            Error::NonFinite { .. }
            | Error::Factorization { .. }
            | Error::ZeroColumn(_)
            | Error::ZeroNormRow(_) => 3,
            Error::Io { .. } | Error::Parse { .. } => 4,
        }
    }
}
