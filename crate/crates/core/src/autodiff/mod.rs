//! Dense reverse-mode differentiation, losses and the optimizer.

mod kernels;
mod loss;
mod optim;
mod tape;

use thiserror::Error;

pub use kernels::{conv_out_size, sigmoid};
pub use loss::{cross_entropy, normalized_kl, normalized_probs, softmax};
pub use optim::{cosine_lr, OptimState};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid optimizer setting: {0}")]
    Config(String),
}
