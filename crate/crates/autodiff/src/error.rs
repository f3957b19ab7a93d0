use std::io;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint entry name is not UTF-8")]
    Name,
    #[error("checkpoint entry {name}: {source}")]
    Tensor { name: String, source: TensorError },
    #[error("checkpoint entry {name} does not match the model ({detail})")]
    Mismatch { name: String, detail: String },
}
