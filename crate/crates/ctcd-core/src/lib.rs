//! Co-training and co-distillation of two differently sized transformer
//! encoders, verified at desk scale on synthetic masked-language-modeling
//! and downstream classification tasks.
//!
//! The crate is generic over the element type via [`scalar::Scalar`]:
//! `f64` backs the oracle and acceptance tests, `f32` the training runs.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use scalar::{Precision, Scalar};

/// Concrete aliases for the two supported precisions.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type ModelParameters32 = model::ModelParameters<f32>;
pub type ModelParameters64 = model::ModelParameters<f64>;
