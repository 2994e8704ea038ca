//! Scale-attention networks for dense visual correspondence.
//!
//! A weight-shared residual feature network runs over an image pyramid, an
//! attention network predicts per-pixel weights over the scales, and the
//! attention-weighted sum of the upsampled scale features gives one dense
//! descriptor map. Descriptors are matched with inner products in a siamese
//! arrangement and trained with a softmax cross-entropy over candidates.

// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod cli;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod matcher;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use autograd::{Graph, NodeId};
pub use error::{Error, Result};
pub use flow::FlowField;
pub use matcher::FeatureMap;
pub use model::{AttentionMap, Fusion, ModelConfig, ModelParams};
pub use tensor::{Float, Tensor};
