use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent mismatch in a tensor operation. The message names the
    /// offending extents so the caller can see both sides.
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint has bad magic {found:?}, expected \"CRPN\"")]
    BadMagic { found: [u8; 4] },

    #[error("checkpoint version {0} is not supported (supported: 1)")]
    UnsupportedVersion(u32),

    #[error("checkpoint is truncated: {0}")]
    Truncated(String),

    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),

    #[error("non-finite gradient in parameter {name} at step {step}")]
    NonFiniteGrad { name: String, step: u64 },

    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: u64 },

    #[error("no usable anchors: {0}")]
    NoAnchors(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }
}
