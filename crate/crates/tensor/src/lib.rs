//! Dense channels-last tensors and a small reverse-mode autodiff tape.
//!
//! Volumetric feature maps are stored as `[batch, x, y, z, channels]` with the
//! channel axis innermost. Convolution weights are `[out, kx, ky, kz, in]`,
//! linear weights are `[out, in]`. Every op is generic over [`Scalar`] so the
//! same network code runs in `f32` for training and `f64` for gradient checks.

mod error;
mod gemm;
mod graph;
pub mod ops;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use ops::gather::ZERO_ROW;
pub use scalar::Scalar;
pub use tensor::Tensor;
