use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar {
        op: &'static str,
        shape: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("convolution geometry: {0}")]
    ConvGeometry(String),
    #[error("cannot resize {from:?} to {to:?} with an integer nearest-neighbour ratio")]
    Resize { from: [usize; 2], to: [usize; 2] },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("degenerate box")]
    DegenerateBox,
}
