use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Error type shared by the tensor engine, the model, and the data pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    ShapeMismatch {
        op: &'static str,
        detail: String,
    },
    /// Convolution kernel extent outside the supported {1, 3} set.
    UnsupportedKernel(usize),
    /// Input channel count not divisible by the group count.
    BadGroups {
        cin: usize,
        groups: usize,
    },
    /// An extent is not divisible by the required factor.
    NonDivisible {
        what: &'static str,
        extent: usize,
        divisor: usize,
    },
    /// Normalized axis has zero length.
    EmptyAxis,
    /// `backward` called on a non-scalar node.
    NonScalarLoss(Vec<usize>),
    /// A forward or backward kernel produced NaN or Inf.
    NonFinite {
        op: &'static str,
    },
    /// Prior bank consulted before first-batch initialization.
    BankUninitialized,
    /// Model or layer configuration violates an invariant.
    BadConfig(String),
    /// Attention-probe request cannot be served (bad indices or k = 0).
    ProbeUnavailable(String),
    /// Training aborted on a non-finite loss.
    NanLoss {
        iter: u64,
    },
    /// A gradient expected by the optimizer is missing.
    MissingGrad(String),
    /// Serialized container has the wrong magic bytes.
    BadMagic {
        expected: &'static str,
    },
    /// Serialized container ends before its declared payload.
    Truncated(&'static str),
    /// Unknown dtype tag in a serialized container.
    UnsupportedDtype(u8),
    /// Checkpoint does not match the model it is being loaded into.
    ConfigMismatch(String),
    /// Malformed text or binary format (PNM header, config file, ...).
    Format(String),
    /// Input too small for the requested crop/pad operation.
    TooSmall(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::UnsupportedKernel(k) => write!(f, "conv2d: unsupported kernel size {k} (expected 1 or 3)"),
            Error::BadGroups { cin, groups } => {
                write!(f, "conv2d: input channels {cin} not divisible by groups {groups}")
            }
            Error::NonDivisible { what, extent, divisor } => {
                write!(f, "{what}: extent {extent} not divisible by {divisor}")
            }
            Error::EmptyAxis => write!(f, "layer_norm: normalized axis is empty"),
            Error::NonScalarLoss(shape) => write!(f, "backward: loss must be scalar, got shape {shape:?}"),
            Error::NonFinite { op } => write!(f, "{op}: produced non-finite values"),
            Error::BankUninitialized => write!(f, "regional prior bank used before first-batch initialization"),
            Error::BadConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::ProbeUnavailable(msg) => write!(f, "attention probe unavailable: {msg}"),
            Error::NanLoss { iter } => write!(f, "training aborted: non-finite loss at iteration {iter}"),
            Error::MissingGrad(name) => write!(f, "missing gradient for parameter {name}"),
            Error::BadMagic { expected } => write!(f, "bad magic bytes (expected {expected})"),
            Error::Truncated(what) => write!(f, "{what}: truncated data"),
            Error::UnsupportedDtype(tag) => write!(f, "unsupported dtype tag {tag}"),
            Error::ConfigMismatch(msg) => write!(f, "checkpoint/config mismatch: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::TooSmall(msg) => write!(f, "input too small: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
