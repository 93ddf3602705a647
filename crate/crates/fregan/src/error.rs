use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the failure classes the CLI
/// distinguishes: configuration/usage problems exit with code 2, everything
/// else with code 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape disagreement between tensors or between a tensor and a layer.
    #[error("dimension error on axis {axis}: {detail}")]
    Dimension { axis: &'static str, detail: String },

    /// Invalid configuration or CLI usage (bad flag value, missing input).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// API misuse: a precondition on a call was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN/Inf showed up where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Input value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed binary artifact (checkpoint).
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// Malformed text artifact (manifest).
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {detail}")]
    Image { path: PathBuf, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
