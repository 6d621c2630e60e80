use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("no timesteps")]
    NoTimesteps,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("not sub-bit: eta={eta} must be in 1..{elements} for a {k_h}x{k_w} kernel")]
    NotSubBit {
        eta: u32,
        k_h: usize,
        k_w: usize,
        elements: usize,
    },

    #[error("kernel side must exceed 1, got {k_h}x{k_w}")]
    KernelTooSmall { k_h: usize, k_w: usize },

    #[error("degenerate omega at ({i}, {j}): outlier equals all of its neighbors")]
    DegenerateOmega { i: usize, j: usize },

    #[error("degenerate Gram: membrane potential is all zero")]
    DegenerateGram,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found}, expected {expected}")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("truncated stream: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("{0} trailing bytes after the last layer")]
    TrailingBytes(usize),

    #[error("layer {layer}: codeword index {index} out of range for eta={eta}")]
    IndexOutOfRange { layer: usize, index: u64, eta: u32 },

    #[error("duplicate codeword at positions {first} and {second}")]
    DuplicateCodeword { first: usize, second: usize },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn shape_err(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Error {
    Error::ShapeMismatch {
        expected: format!("{expected:?}"),
        actual: format!("{actual:?}"),
    }
}
