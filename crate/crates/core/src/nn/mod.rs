//! Minimal neural engine: dense tensors, 3-D convolution, batch norm,
//! ReLU, Adam and a cosine learning-rate schedule.

mod activation;
mod adam;
mod batchnorm;
mod conv;
#[cfg(target_arch = "x86_64")]
mod direct;
mod param;
mod real;
mod schedule;
mod tensor;

#[cfg(test)]
pub(crate) mod testing;

pub use activation::{relu, relu_backward};
pub use adam::AdamState;
pub use batchnorm::{BatchNormLayer, Mode};
pub use conv::{conv3d_backward, conv3d_forward, set_simd_kernels, simd_kernels_active, Conv3dLayer, ConvGrads};
pub use param::Param;
pub use real::Real;
pub use schedule::cosine_lr;
pub use tensor::Tensor;
