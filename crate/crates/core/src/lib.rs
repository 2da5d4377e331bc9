//! Training small classifiers under label noise and localizing where they
//! memorize: per-layer gradient accounting, layer rewinding and retraining,
//! greedy critical-unit removal, and example-tied dropout.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the common choices.

pub mod checkpoint;
pub mod data;
pub mod digest;
pub mod error;
pub mod etdrop;
pub mod graph;
pub mod kernels;
pub mod localization;
pub mod model;
pub mod neuron_search;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{finite_diff_coords, finite_diff_gradient, Bindings, Gradients, Graph, NodeId, NormStats};
pub use model::{
    Dropout, ExampleTiedDropout, ForwardOptions, GateSet, GradRequest, InputShape, LayerSpec, Mode, Model, ModelSpec,
    Pool, StaticSparseMask, UnitId,
};
pub use optim::{cosine_similarity, sgd_step, OneCycleSchedule, Sgd};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
