//! Forward and backward implementations of every layer the networks use.
//!
//! Everything here is a pure function over [`Tensor`](crate::Tensor)s: no
//! hidden state, bit-identical results for identical inputs, and fixed
//! summation order (parallelism only ever splits work across disjoint
//! output slices).

mod conv;
mod deform;
mod dense;
mod loss;
mod norm;
mod pool;

pub use conv::{conv2d, conv2d_backward, conv_out_extent, ConvGrads};
pub use deform::{bilinear_sample, deform_conv2d, deform_conv2d_backward, DeformGrads};
pub use dense::{
    global_avg_pool, global_avg_pool_backward, linear, linear_backward, relu, relu_backward,
    rowmax_backward, rowmax_with_indices, sigmoid, sigmoid_backward, LinearGrads,
};
pub use loss::{bce_loss, bce_loss_backward, combined_loss, BCE_EPS};
pub use norm::{
    batchnorm_infer, batchnorm_train, batchnorm_train_backward, BatchNormGrads, BatchNormOut,
    BN_EPS,
};
pub use pool::{
    maxpool2d, maxpool2d_backward, maxpool2d_with_indices, upsample_bilinear,
    upsample_bilinear_backward,
};
