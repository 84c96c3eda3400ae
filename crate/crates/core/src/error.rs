use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("point {point:?} lies outside the domain")]
    OutsideDomain { point: Vec<f64> },

    #[error("conjugate gradients did not converge after {iterations} iterations (relative residual {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("no cell qualifies as a streamline seed")]
    EmptySeeds,

    #[error("{path}: {source}")]
    Nifti {
        path: PathBuf,
        #[source]
        source: NiftiError,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Failure kinds when decoding a NIfTI-1 volume.
#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("not a NIfTI-1 file (magic {0:?})")]
    BadMagic([u8; 4]),

    #[error("short header: {0} bytes, need 348")]
    ShortHeader(usize),

    #[error("bad sizeof_hdr {0}, expected 348")]
    BadHeaderSize(i32),

    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("unsupported dimensions {0:?}")]
    BadDimensions([i16; 8]),

    #[error("invalid voxel offset {0}")]
    BadVoxOffset(f32),

    #[error("truncated data section: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },

    #[error("gzip stream is corrupt: {0}")]
    Gzip(std::io::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
