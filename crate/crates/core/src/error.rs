use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("non-finite loss when perturbing {name}[{index}]")]
    NonFiniteLoss { name: String, index: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("signal too short: {len} samples, one frame needs {frame_len}")]
    SignalTooShort { len: usize, frame_len: usize },
    #[error("{bins} mel bins cannot be resolved with fft size {fft_size}: filter {filter} covers no bin")]
    TooManyMelBins {
        bins: usize,
        fft_size: usize,
        filter: usize,
    },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("contrastive loss needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
