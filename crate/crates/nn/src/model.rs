use std::ops::Range;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::graph::{Activation, LayerGraph, Op, ParamSpec, Shape};
use crate::tensor::Tensor;

/// A layer graph together with its weights and per-layer trainable flags.
#[derive(Clone, Debug)]
pub struct Model {
    graph: LayerGraph,
    shapes: Vec<Shape>,
    specs: Vec<Vec<ParamSpec>>,
    params: Vec<Vec<Tensor>>,
    trainable: Vec<bool>,
}

/// Copy of every weight and buffer, used for best-checkpoint restore.
#[derive(Clone, Debug)]
pub struct Snapshot(Vec<Vec<Tensor>>);

impl Model {
    /// Builds a model with freshly initialized weights: He-uniform kernels
    /// for ReLU layers, Glorot-uniform otherwise, zero biases, identity
    /// batch-norm.
    pub fn init<R: Rng + ?Sized>(graph: LayerGraph, rng: &mut R) -> Result<Self> {
        let shapes = graph.infer_shapes()?;
        let specs = graph.param_specs()?;
        let mut params = Vec::with_capacity(specs.len());
        for (node, node_specs) in graph.nodes.iter().zip(&specs) {
            let act = node.op.activation();
            let tensors = node_specs
                .iter()
                .map(|spec| init_param(&node.op, act, spec, rng))
                .collect();
            params.push(tensors);
        }
        let trainable = graph.nodes.iter().map(|n| n.op.has_weights()).collect();
        Ok(Self {
            graph,
            shapes,
            specs,
            params,
            trainable,
        })
    }

    /// Builds a model from explicit weights, checked against the graph.
    pub fn from_params(graph: LayerGraph, params: Vec<Vec<Tensor>>) -> Result<Self> {
        let shapes = graph.infer_shapes()?;
        let specs = graph.param_specs()?;
        if params.len() != specs.len() {
            return Err(NnError::Weights(format!(
                "{} weight groups for {} layers",
                params.len(),
                specs.len()
            )));
        }
        for ((node, s), p) in graph.nodes.iter().zip(&specs).zip(&params) {
            if s.len() != p.len() || s.iter().zip(p).any(|(s, t)| s.shape != t.shape()) {
                return Err(NnError::Weights(format!(
                    "layer `{}` weights do not match its declared shapes",
                    node.name
                )));
            }
        }
        let trainable = graph.nodes.iter().map(|n| n.op.has_weights()).collect();
        Ok(Self {
            graph,
            shapes,
            specs,
            params,
            trainable,
        })
    }

    pub fn graph(&self) -> &LayerGraph {
        &self.graph
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.graph.input_shape
    }

    pub fn specs(&self, node: usize) -> &[ParamSpec] {
        &self.specs[node]
    }

    pub fn params(&self, node: usize) -> &[Tensor] {
        &self.params[node]
    }

    pub fn params_mut(&mut self, node: usize) -> &mut [Tensor] {
        &mut self.params[node]
    }

    pub fn param(&self, node: usize, name: &str) -> Option<&Tensor> {
        self.specs[node]
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.params[node][i])
    }

    /// Replaces one named weight, keeping its declared shape.
    pub fn set_param(&mut self, node: usize, name: &str, value: Tensor) -> Result<()> {
        let layer = &self.graph.nodes[node].name;
        let idx = self.specs[node]
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| NnError::Weights(format!("layer `{layer}` has no weight `{name}`")))?;
        if self.specs[node][idx].shape != value.shape() {
            return Err(NnError::Weights(format!(
                "`{layer}/{name}` expects shape {:?}, got {:?}",
                self.specs[node][idx].shape,
                value.shape()
            )));
        }
        self.params[node][idx] = value;
        Ok(())
    }

    /// A layer is trainable only when it owns weights and is not frozen.
    pub fn is_trainable(&self, node: usize) -> bool {
        self.trainable[node] && !self.specs[node].is_empty()
    }

    pub fn set_trainable(&mut self, node: usize, trainable: bool) {
        self.trainable[node] = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.trainable.iter_mut().for_each(|t| *t = trainable);
    }

    /// Weight (non-buffer) element count of one layer.
    pub fn weight_count(&self, node: usize) -> usize {
        self.specs[node]
            .iter()
            .filter(|s| !s.buffer)
            .map(ParamSpec::numel)
            .sum()
    }

    pub fn total_weights(&self) -> usize {
        (0..self.graph.len()).map(|i| self.weight_count(i)).sum()
    }

    pub fn trainable_weights(&self) -> usize {
        (0..self.graph.len())
            .filter(|&i| self.is_trainable(i))
            .map(|i| self.weight_count(i))
            .sum()
    }

    pub fn buffer_count(&self) -> usize {
        self.specs
            .iter()
            .flatten()
            .filter(|s| s.buffer)
            .map(ParamSpec::numel)
            .sum()
    }

    /// SHA-256 over the names and little-endian bytes of every weight and
    /// buffer of the given layers.
    pub fn checksum(&self, nodes: Range<usize>) -> String {
        let mut hasher = Sha256::new();
        for node in nodes {
            hasher.update(self.graph.nodes[node].name.as_bytes());
            for (spec, tensor) in self.specs[node].iter().zip(&self.params[node]) {
                hasher.update(spec.name.as_bytes());
                for v in tensor.data() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot(self.params.clone())
    }

    pub fn restore(&mut self, snapshot: &Snapshot) {
        self.params.clone_from(&snapshot.0);
    }

    pub(crate) fn params_all_mut(&mut self) -> &mut [Vec<Tensor>] {
        &mut self.params
    }
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], limit: f32, rng: &mut R) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::from_vec(shape, data).expect("shape and length agree")
}

fn init_param<R: Rng + ?Sized>(op: &Op, act: Activation, spec: &ParamSpec, rng: &mut R) -> Tensor {
    let shape = &spec.shape;
    match spec.name {
        "kernel" | "pointwise_kernel" | "depthwise_kernel" => {
            let (fan_in, fan_out) = match (op, spec.name) {
                (Op::Dense { .. }, _) => (shape[0], shape[1]),
                (_, "depthwise_kernel") => (shape[0] * shape[1], shape[0] * shape[1]),
                _ => {
                    let receptive = shape[0] * shape[1];
                    (receptive * shape[2], receptive * shape[3])
                }
            };
            let limit = if act == Activation::Relu && spec.name != "depthwise_kernel" {
                (6.0 / fan_in as f32).sqrt()
            } else {
                (6.0 / (fan_in + fan_out) as f32).sqrt()
            };
            uniform(shape, limit, rng)
        }
        "gamma" | "moving_variance" => Tensor::full(shape, 1.0),
        _ => Tensor::zeros(shape),
    }
}
