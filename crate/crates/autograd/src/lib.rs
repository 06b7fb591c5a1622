//! Reverse-mode automatic differentiation over dense `f32`/`f64` tensors.
//!
//! A [`Graph`] is a tape; each op on a [`Var`] appends a node holding the
//! forward value and a backward closure. The op set is the one a small
//! convolutional detector needs: strided/dilated and modulated deformable
//! convolution, batch normalisation, bilinear resampling, ROI align,
//! broadcasting arithmetic, reductions and softmax.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod profile;
pub mod scalar;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use ops::conv::{conv2d_forward, Conv2dSpec};
pub use ops::deform::bilinear_sample;
pub use ops::elementwise::sigmoid;
pub use ops::norm::BatchStats;
pub use ops::resample::{resize_bilinear_forward, Roi};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
