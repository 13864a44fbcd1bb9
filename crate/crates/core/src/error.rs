//! Error types shared by every stage of the engine.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, QuantError>;

/// Coarse error category. The CLI maps each category onto its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Io,
    Format,
    Validation,
    Numerical,
}

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("matrix is not symmetric (entry ({row}, {col}))")]
    NotSymmetric { row: usize, col: usize },

    #[error(
        "damped Hessian is singular (lambda = {lambda:e}); increase the damping ratio (currently {damping_ratio})"
    )]
    SingularHessian { lambda: f64, damping_ratio: f64 },

    #[error("non-finite value produced during {0}; the Hessian damping is likely too small")]
    NonFinite(String),

    #[error("search space of {size} assignments exceeds the limit of {limit}")]
    SearchSpaceOverflow { size: f64, limit: f64 },

    #[error("graph error at node '{node}': {reason}")]
    Graph { node: String, reason: String },

    #[error("graph file is malformed: {0}")]
    GraphSyntax(String),

    #[error("missing tensor '{0}'")]
    MissingTensor(String),

    #[error("bad magic bytes: expected FADETNSR")]
    BadMagic,

    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("layer '{layer}': {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<QuantError>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("report serialization failed: {0}")]
    Serialize(String),
}

impl QuantError {
    pub fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        QuantError::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn graph(node: impl Into<String>, reason: impl Into<String>) -> Self {
        QuantError::Graph {
            node: node.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QuantError::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach the name of the layer being processed.
    pub fn in_layer(self, layer: impl Into<String>) -> Self {
        QuantError::Layer {
            layer: layer.into(),
            source: Box::new(self),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            QuantError::Io { .. } | QuantError::Serialize(_) => ErrorCategory::Io,
            QuantError::BadMagic
            | QuantError::VersionMismatch { .. }
            | QuantError::CrcMismatch { .. }
            | QuantError::Truncated(_)
            | QuantError::Malformed(_)
            | QuantError::GraphSyntax(_) => ErrorCategory::Format,
            QuantError::NotPositiveDefinite { .. }
            | QuantError::SingularHessian { .. }
            | QuantError::NonFinite(_)
            | QuantError::SearchSpaceOverflow { .. } => ErrorCategory::Numerical,
            QuantError::Layer { source, .. } => source.category(),
            QuantError::InvalidInput(_)
            | QuantError::InvalidConfig(_)
            | QuantError::ShapeMismatch { .. }
            | QuantError::NotSymmetric { .. }
            | QuantError::Graph { .. }
            | QuantError::MissingTensor(_) => ErrorCategory::Validation,
        }
    }
}
