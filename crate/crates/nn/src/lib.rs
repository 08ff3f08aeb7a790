//! A small NHWC convolutional network engine: layer graphs, CPU kernels,
//! training-mode forward/backward with per-layer freezing, optimizers and
//! a sharded on-disk weight format.

pub mod error;
pub mod exec;
pub mod graph;
pub mod io;
pub mod keras;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{NnError, Result};
pub use exec::{Gradients, OutputGrad, Tape};
pub use graph::{Activation, GraphBuilder, LayerGraph, Node, NodeId, Op, Padding, ParamSpec, Shape};
pub use model::{Model, Snapshot};
pub use optim::{Optimizer, OptimizerConfig};
pub use tensor::Tensor;
