use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an argument outside the operation's domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// A point sits on or behind the image plane of the projecting camera.
    #[error("degenerate projection: camera-space depth {depth} is not in front of the camera")]
    DegenerateProjection { depth: f64 },

    /// A loss term evaluated to NaN or infinity during training.
    #[error("non-finite loss term `{term}` ({value}) at step {step}")]
    NonFinite { term: String, step: usize, value: f64 },

    /// A structural invariant was found violated (e.g. a non-monotone response curve).
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// A file could not be parsed.
    #[error("malformed {kind} file {path:?}: {reason}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
