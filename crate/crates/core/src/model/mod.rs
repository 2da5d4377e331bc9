//! Feed-forward classifiers with per-unit gates, dropout regimes, and static
//! sparse masking.

mod dropout;
mod gates;
mod network;
mod sparse;
mod spec;

pub use dropout::ExampleTiedDropout;
pub use gates::{GateSet, UnitId};
pub use network::{argmax_rows, Dropout, ForwardOptions, GradRequest, Mode, Model, NamedTensor, RunOutput, BN_EPS, BN_MOMENTUM};
pub use sparse::StaticSparseMask;
pub use spec::{Activation, InputShape, LayerKind, LayerSpec, ModelSpec, Pool};
