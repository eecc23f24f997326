//! A small CPU tensor engine with exactly the layers needed by the frame
//! stream networks: convolution, batch normalization, ReLU, max/average
//! pooling, global average pooling, flatten and fully connected layers, plus
//! softmax cross-entropy, Adam and a finite-difference gradient checker.
//!
//! Computation is single-threaded and deterministic: identical inputs give
//! bit-identical outputs.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod sequential;
pub mod tensor;

pub use adam::{adam_update, Adam, AdamConfig, Moments};
pub use checkpoint::{AdamSnapshot, Checkpoint, NamedTensor};
pub use gradcheck::{grad_check, grad_check_cross_entropy, GradCheckReport};
pub use layers::{Layer, LayerSpec, Mode, Param, PoolKind};
pub use loss::{softmax, softmax_cross_entropy, CrossEntropy};
pub use sequential::Sequential;
pub use tensor::{Dims, Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite gradient in `{param}` at index {index}: {value}")]
    NonFiniteGradient { param: String, index: usize, value: f64 },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EngineError>;
