//! Small tensor engine: f64 tensors, a reverse-mode tape, the layers the
//! generator and discriminator are built from, and Adam.

use thiserror::Error;

pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod tape;
pub mod tensor;


pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{Bound, Conv2d, ConvTranspose2d, Linear, ParamId, ParamSet, ResidualBlock, TemporalAttention};
pub use optim::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("spatial dims {h}x{w} not divisible by {k}")]
    NotDivisible { h: usize, w: usize, k: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
