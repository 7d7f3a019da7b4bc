//! Deterministic dense-tensor kernels for the small convolutional networks
//! used by the two-branch toolkit.
//!
//! Every operation comes as a forward function plus an explicit backward
//! function; callers chain them in reverse order to obtain gradients. All
//! tensors are row-major, and image tensors use NCHW layout.

#![allow(clippy::needless_range_loop)]

mod batchnorm;
#[cfg(feature = "oracles")]
pub mod check;
mod conv;
mod error;
mod gemm;
mod ops;
mod optim;
mod real;
mod tensor;

pub use batchnorm::{
    batchnorm, batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormOutput, BnMode,
    RunningStats, BN_EPSILON, BN_MOMENTUM,
};
pub use conv::{conv2d, conv2d_backward, conv_output_dim, Conv2dGrads, Conv2dSpec};
pub use error::{Result, TensorError};
pub use gemm::gemm;
pub use ops::{
    dense, dense_backward, elementwise_add, global_avgpool, global_avgpool_backward, maxpool2x2,
    maxpool2x2_backward, relu, relu_backward, softmax_cross_entropy, DenseGrads, MaxPoolOutput,
};
pub use optim::{sgd_step, OptimizerState, ParamRef};
pub use real::Real;
pub use tensor::Tensor;
