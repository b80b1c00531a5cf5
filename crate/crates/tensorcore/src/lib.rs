//! Deterministic f64 tensor engine with reverse-mode autodiff.
//!
//! Provides exactly the layers a small multi-task convolutional pipeline
//! needs — standard and deformable 2-D convolution, pooling, bilinear
//! resampling, batch normalization, dense layers, binary cross entropy —
//! together with an Adam optimizer, finite-difference gradient checking,
//! and a binary checkpoint container. Identical inputs always produce
//! bit-identical outputs; parallelism never changes summation order.

mod adam;
mod checkpoint;
mod gradcheck;
pub mod ops;
mod params;
mod tape;
mod tensor;
pub mod verify;

pub use adam::{AdamState, PlateauTracker, ADAM_BETA1, ADAM_BETA2, ADAM_DEFAULT_LR, ADAM_EPS};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{finite_diff_grad, max_relative_error, FD_DEFAULT_STEP};
pub use params::Params;
pub use tape::{Gradients, Tape, VarId};
pub use tensor::{ConvParams, OffsetField, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numeric error in '{name}': {detail}")]
    Numeric { name: String, detail: String },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
