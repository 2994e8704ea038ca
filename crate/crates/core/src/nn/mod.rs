//! Forward and backward kernels for the layers the networks are built from.
//!
//! Kernels work on flat `C x H x W` slices. The autograd graph in
//! [`crate::autograd`] stitches them together and owns the saved buffers.

pub mod batchnorm;
pub mod conv;
pub mod resize;
pub mod softmax;

pub use batchnorm::{BatchNormState, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
pub use conv::Conv2dGeometry;
pub use resize::ResizePlan;
