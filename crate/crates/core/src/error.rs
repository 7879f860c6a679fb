use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("layer {layer} has {available} available experts, top-k needs {k}")]
    TooFewExperts { layer: usize, available: usize, k: usize },

    #[error("non-finite value at token {token}, layer {layer}: {what}")]
    NonFinite { token: usize, layer: usize, what: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic in {kind} file: expected {expected:?}")]
    BadMagic { kind: &'static str, expected: [u8; 4] },

    #[error("unsupported {kind} format version {found} (expected {expected})")]
    VersionMismatch { kind: &'static str, found: u32, expected: u32 },

    #[error("truncated {kind} file: {detail}")]
    Truncated { kind: &'static str, detail: String },

    #[error("checksum mismatch in {kind} file: stored {stored:016x}, computed {computed:016x}")]
    Checksum { kind: &'static str, stored: u64, computed: u64 },

    #[error("malformed {kind} data: {detail}")]
    Malformed { kind: &'static str, detail: String },

    #[error("trace header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("search too large: {0}")]
    SearchTooLarge(String),

    #[error("unknown sample {0}")]
    UnknownSample(u32),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
