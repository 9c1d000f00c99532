use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("degenerate mask: {n} tokens at ratio {ratio} leaves {visible} visible / {masked} masked")]
    DegenerateMask {
        n: usize,
        ratio: f64,
        visible: usize,
        masked: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("unsupported format version {found} in {path} (supported: {supported})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("dimension overflow in {path}: {detail}")]
    DimOverflow { path: PathBuf, detail: String },

    #[error("checkpoint schema error: {0}")]
    Schema(String),

    #[error("manifest {path}, row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("manifest {0} has no entries")]
    EmptyIndex(PathBuf),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("AUC undefined: split contains a single class")]
    AucUndefined,

    #[error("spectral resolution error: patch grid {0:?} has an axis of length 1")]
    SpectralResolution([usize; 3]),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
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
