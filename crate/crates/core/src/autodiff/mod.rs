//! Reverse-mode automatic differentiation over dense tensors.

pub mod gradcheck;
pub mod ops;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use ops::{
    binary_cross_entropy, cross_entropy, gru_forward, kl_divergence, matmul, softmax_masked, GruWeights,
    LOG_FLOOR,
};
pub use tape::{BatchStats, Gradients, Tape, Var};
