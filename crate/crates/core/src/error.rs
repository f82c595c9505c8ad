use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric failure in {op}: non-finite value")]
    NumericFailure { op: &'static str },

    #[error("autodiff: {0}")]
    Tape(String),

    #[error("missing gradient for parameter {0}")]
    MissingGrad(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("depth out of range: {depth} (valid 1..={max})")]
    DepthOutOfRange { depth: usize, max: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("task model is untrained")]
    UntrainedModel,

    #[error("identical images: PSNR is undefined")]
    IdenticalImages,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("all differences zero")]
    AllDifferencesZero,

    #[error("corrupt data in {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("hash mismatch for {path}")]
    HashMismatch { path: PathBuf },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),

    #[error("sample id mismatch: {0}")]
    SampleIdMismatch(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
