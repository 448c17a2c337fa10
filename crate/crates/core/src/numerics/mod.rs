//! Tensors, differentiable operations and gradient checking.

mod conv;
mod gradcheck;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use conv::{
    batch_statistics, conv2d, depthwise_conv2d, max_pool2d, resize_bilinear, sepconv2d, upsample_bilinear_x2,
    Padding,
};
pub use gradcheck::{gradient_check, relative_error, GradCheck, GradientReport};
pub use ops::{bmm, l2_normalize_rows, matmul, softmax_rowwise};
pub use scalar::Real;
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Softmax along the last axis.
pub fn softmax_last<T: Real>(logits: &Tensor<T>) -> crate::Result<Tensor<T>> {
    softmax_rowwise(logits, logits.rank().saturating_sub(1))
}
