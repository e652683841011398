//! Condition-embedded prompt segmentation on a from-scratch autograd engine.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod battery;
pub mod cemb;
pub mod model;
pub mod nn;
pub mod params;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{DType, Float, Tensor};
