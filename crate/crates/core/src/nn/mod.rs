//! Layers used by the encoder, prompt encoder, condition block and decoder.
//!
//! Parameters live in a [`crate::params::ParamStore`]; the structs here hold
//! the [`Var`](crate::graph::Var) handles a forward pass binds them to.

mod attention;
mod conv;
mod norm;
mod resize;

pub use attention::{attend, attention_block, AttentionBlockParams};
pub use conv::{conv2d, conv_transpose2d, Conv2dParams, ConvTranspose2dParams};
pub use norm::{instance_stats, layer_norm, EpsPlacement, DEFAULT_EPS};
pub use resize::{bilinear_taps, resize_bilinear_tensor};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Float;

/// Fully connected layer `y = x·Wᵀ + b` on the last axis.
#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub weight: Var,
    pub bias: Option<Var>,
}

pub fn linear<T: Float>(g: &mut Graph<T>, x: Var, p: &LinearParams) -> Result<Var> {
    g.linear(x, p.weight, p.bias)
}
