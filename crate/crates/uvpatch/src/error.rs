use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants are grouped by the process exit code they map to: configuration
/// problems (2), missing upstream artifacts (3), and numeric failures (4).
/// Everything else exits 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {actual}")]
    ShapeMismatch {
        op: String,
        expected: String,
        actual: String,
    },

    #[error("{op}: output must be a scalar, got shape {shape:?}")]
    NotScalar { op: String, shape: Vec<usize> },

    #[error("{context}: non-finite value encountered{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite {
        context: String,
        step: Option<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("{path}: {message}")]
    Decode { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape_mismatch(
        op: impl Into<String>,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::ShapeMismatch {
            op: op.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
            step: None,
        }
    }

    pub fn non_finite_at(context: impl Into<String>, step: usize) -> Self {
        Error::NonFinite {
            context: context.into(),
            step: Some(step),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 missing artifact, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::NonFinite { .. } => 4,
            _ => 1,
        }
    }
}
