use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("non-finite gradient at attack iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("estimator composition error: {0}")]
    Composition(String),

    #[error("weight file {path}: bad magic {found:?} at offset 0 (expected \"MLAB\")")]
    WeightBadMagic { path: String, found: [u8; 4] },

    #[error("weight file {path}: unsupported version {found} (expected {expected})")]
    WeightBadVersion { path: String, found: u32, expected: u32 },

    #[error("weight file {path}: truncated at byte {offset} (needed {needed} more bytes)")]
    WeightTruncated { path: String, offset: usize, needed: usize },

    #[error("architecture mismatch: file holds '{found}', expected '{expected}'")]
    ArchitectureMismatch { found: String, expected: String },

    #[error("idx file {path}: bad magic 0x{found:08x} at offset 0")]
    IdxBadMagic { path: String, found: u32 },

    #[error("idx file {path}: truncated payload, expected {expected} bytes but found {actual} (at offset {offset})")]
    IdxTruncated { path: String, expected: usize, actual: usize, offset: usize },

    #[error("idx file {path}: extent product overflows at offset {offset}")]
    IdxExtentOverflow { path: String, offset: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("toy dataset: separability margin not reached in {retries} retries")]
    SeparabilityUnreachable { retries: usize },

    #[error("degenerate linear system: {0}")]
    SingularSystem(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("config error at '{key}': {message}")]
    Config { key: String, message: String },

    #[error("run-time assertion failed: {0}")]
    RuntimeCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI (0 is success).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) => 2,
            Error::RuntimeCheck(_) => 4,
            _ => 3,
        }
    }
}
