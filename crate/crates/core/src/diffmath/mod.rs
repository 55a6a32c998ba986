//! Reverse-mode differentiation over dense `f64` matrices, plus the
//! adaptive-moment optimizer used to train the sequential VAE.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use optim::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};

pub(crate) use tape::{sigmoid, softplus};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("backward needs a scalar root, got {shape}")]
    NonScalarRoot { shape: Shape },
    #[error("non-finite gradient in parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("optimizer got {got} tensors, expected {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("function is not finite at probe of coordinate {coordinate} (tensor {tensor})")]
    Probe { tensor: usize, coordinate: usize },
    #[error("perturbation must be positive, got {0}")]
    BadPerturbation(f64),
}
