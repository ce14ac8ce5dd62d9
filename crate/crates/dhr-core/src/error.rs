use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed npy file {path}: {reason}")]
    NpyFormat { path: PathBuf, reason: String },

    #[error("unsupported npy dtype {descr:?} in {path} (expected '<f4' or '|u1')")]
    NpyUnsupportedDtype { path: PathBuf, descr: String },

    #[error("npy file {path} is Fortran-ordered; only C-contiguous arrays are supported")]
    NpyFortranOrder { path: PathBuf },

    #[error("malformed mask png {path}: {reason}")]
    MaskPngFormat { path: PathBuf, reason: String },

    #[error("png error on {path}: {source}")]
    Png {
        path: PathBuf,
        #[source]
        source: png::DecodingError,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("NaN or non-finite value in {0}")]
    NonFinite(String),

    #[error("scene {id}: {source}")]
    Scene {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Wraps an error with the id of the scene it occurred in.
    pub fn in_scene(self, id: &str) -> Self {
        Error::Scene { id: id.to_string(), source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
