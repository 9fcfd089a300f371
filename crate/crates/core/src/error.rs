use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error(
        "utterance {utterance}: target of length {target_len} needs at least {required} frames, got {frames}"
    )]
    ImpossibleAlignment {
        utterance: usize,
        frames: usize,
        required: usize,
        target_len: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("attention mask leaves query {query} of batch item {batch} with no visible key")]
    AllMasked { batch: usize, query: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("beam search finished no hypothesis within {max_len} tokens")]
    BeamCollapse { max_len: usize },
    #[error("reference corpus is empty")]
    EmptyReference,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
