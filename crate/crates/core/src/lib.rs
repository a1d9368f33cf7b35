//! Span-based temporal sentence localization in untrimmed 3D human motion.
//!
//! The crate is generic over the floating-point element type ([`Scalar`]);
//! the aliases at the crate root fix it to `f64`, which is what training,
//! checkpoints and the command-line tool use.

pub mod autodiff;
pub mod cmr;
pub mod data;
pub mod eval;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod verify;
pub mod train;

pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
