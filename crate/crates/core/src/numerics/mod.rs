//! Tensors, reverse-mode differentiation, and the SGD optimizer.

mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use ops::LAYER_NORM_EPS;
pub use optim::{lr_at, sgd_step, Sgd, SgdConfig};
pub use params::{ParamSet, ParamSource, ParamStack, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{lit, DType, Element, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not describe {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("width {width} is not divisible by {heads} heads")]
    Heads { width: usize, heads: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("numeric overflow: {op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("loss must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a backward sweep")]
    TapeConsumed,
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
}
