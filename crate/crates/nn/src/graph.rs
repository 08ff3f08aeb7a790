//! Declarative layer graphs.
//!
//! A [`LayerGraph`] is an ordered list of nodes; every node consumes the
//! outputs of earlier nodes, so the node order is already a topological
//! order. Node 0 is always the input placeholder. Shapes are per sample,
//! channels-last, without the batch axis.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

pub type NodeId = usize;

/// Per-sample shape: `[h, w, c]` for feature maps, `[units]` for vectors.
pub type Shape = Vec<usize>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

/// Output extent and `(before, after)` padding along one spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxisWindow {
    pub output: usize,
    pub pad_before: usize,
    pub pad_after: usize,
}

impl Padding {
    pub fn resolve(self, input: usize, kernel: usize, stride: usize) -> Option<AxisWindow> {
        if stride == 0 || kernel == 0 || input == 0 {
            return None;
        }
        match self {
            Padding::Valid => {
                if input < kernel {
                    return None;
                }
                Some(AxisWindow {
                    output: (input - kernel) / stride + 1,
                    pad_before: 0,
                    pad_after: 0,
                })
            }
            Padding::Same => {
                let output = input.div_ceil(stride);
                let total = ((output - 1) * stride + kernel).saturating_sub(input);
                Some(AxisWindow {
                    output,
                    pad_before: total / 2,
                    pad_after: total - total / 2,
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Linear,
    Relu,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Op {
    Input,
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
        use_bias: bool,
        activation: Activation,
    },
    /// Depthwise (multiplier 1) followed by a pointwise 1x1 convolution.
    SeparableConv2d {
        filters: usize,
        kernel: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
        use_bias: bool,
        activation: Activation,
    },
    BatchNorm {
        epsilon: f32,
        momentum: f32,
        scale: bool,
        center: bool,
    },
    Activation {
        activation: Activation,
    },
    MaxPool2d {
        pool: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
    },
    AvgPool2d {
        pool: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
    },
    GlobalAvgPool,
    /// `[top, bottom, left, right]`.
    ZeroPad2d {
        padding: [usize; 4],
    },
    Flatten,
    Dense {
        units: usize,
        activation: Activation,
        use_bias: bool,
    },
    Dropout {
        rate: f32,
    },
    Add,
    /// Concatenation along the channel axis.
    Concat,
}

impl Op {
    pub fn conv(filters: usize, kernel: usize, activation: Activation) -> Self {
        Op::Conv2d {
            filters,
            kernel: [kernel, kernel],
            strides: [1, 1],
            padding: Padding::Valid,
            use_bias: true,
            activation,
        }
    }

    pub fn max_pool(pool: usize) -> Self {
        Op::MaxPool2d {
            pool: [pool, pool],
            strides: [pool, pool],
            padding: Padding::Valid,
        }
    }

    pub fn dense(units: usize, activation: Activation) -> Self {
        Op::Dense {
            units,
            activation,
            use_bias: true,
        }
    }

    pub fn batch_norm() -> Self {
        Op::BatchNorm {
            epsilon: 1e-3,
            momentum: 0.99,
            scale: true,
            center: true,
        }
    }

    pub fn dropout(rate: f32) -> Self {
        Op::Dropout { rate }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv2d { .. } => "conv2d",
            Op::SeparableConv2d { .. } => "separable_conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Activation { .. } => "activation",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::ZeroPad2d { .. } => "zero_pad2d",
            Op::Flatten => "flatten",
            Op::Dense { .. } => "dense",
            Op::Dropout { .. } => "dropout",
            Op::Add => "add",
            Op::Concat => "concat",
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Op::Conv2d { activation, .. }
            | Op::SeparableConv2d { activation, .. }
            | Op::Dense { activation, .. }
            | Op::Activation { activation } => *activation,
            _ => Activation::Linear,
        }
    }

    /// Whether the op carries weights (trainable or not).
    pub fn has_weights(&self) -> bool {
        matches!(
            self,
            Op::Conv2d { .. } | Op::SeparableConv2d { .. } | Op::BatchNorm { .. } | Op::Dense { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    #[serde(flatten)]
    pub op: Op,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<NodeId>,
}

/// One weight tensor a node owns. Buffers (batch-norm moving statistics)
/// are never trainable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub buffer: bool,
}

impl ParamSpec {
    fn weight(name: &'static str, shape: Vec<usize>) -> Self {
        Self {
            name,
            shape,
            buffer: false,
        }
    }

    fn buffer(name: &'static str, shape: Vec<usize>) -> Self {
        Self {
            name,
            shape,
            buffer: true,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub input_shape: [usize; 3],
    pub nodes: Vec<Node>,
}

impl LayerGraph {
    pub fn from_json(text: &str) -> Result<Self> {
        let graph: LayerGraph = serde_json::from_str(text)
            .map_err(|e| NnError::Graph(format!("cannot parse topology: {e}")))?;
        graph.infer_shapes()?;
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn output(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn node_index(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Number of output units of the final layer.
    pub fn output_units(&self) -> Result<usize> {
        let shapes = self.infer_shapes()?;
        let last = &shapes[self.output()];
        if last.len() != 1 {
            return Err(NnError::Graph(format!(
                "final layer produces {last:?}, expected a vector"
            )));
        }
        Ok(last[0])
    }

    /// Propagates shapes through the graph, checking arity, ordering and
    /// compatibility of every node.
    pub fn infer_shapes(&self) -> Result<Vec<Shape>> {
        if self.nodes.is_empty() || self.nodes[0].op != Op::Input {
            return Err(NnError::Graph("node 0 must be the input".into()));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(NnError::Graph(format!(
                "input shape {:?} has an empty dimension",
                self.input_shape
            )));
        }
        let mut names = HashSet::new();
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            if !names.insert(node.name.as_str()) {
                return Err(NnError::Graph(format!("duplicate layer name `{}`", node.name)));
            }
            if idx > 0 && node.op == Op::Input {
                return Err(NnError::Graph(format!("`{}`: only node 0 may be an input", node.name)));
            }
            if let Some(&bad) = node.inputs.iter().find(|&&i| i >= idx) {
                return Err(NnError::Graph(format!(
                    "`{}` consumes node {bad}, which does not precede it",
                    node.name
                )));
            }
            let arity_ok = match node.op {
                Op::Input => node.inputs.is_empty(),
                Op::Add | Op::Concat => node.inputs.len() >= 2,
                _ => node.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(layer_err(
                    node,
                    format!("wrong number of inputs ({})", node.inputs.len()),
                ));
            }
            let ins: Vec<&Shape> = node.inputs.iter().map(|&i| &shapes[i]).collect();
            let shape = if idx == 0 {
                self.input_shape.to_vec()
            } else {
                output_shape(node, &ins)?
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Weight tensors of every node, in storage order.
    pub fn param_specs(&self) -> Result<Vec<Vec<ParamSpec>>> {
        let shapes = self.infer_shapes()?;
        Ok(self
            .nodes
            .iter()
            .map(|node| {
                let input = node.inputs.first().map(|&i| shapes[i].as_slice());
                node_params(&node.op, input.unwrap_or(&[]))
            })
            .collect())
    }

    /// `(weights, buffers)` element counts per node.
    pub fn param_counts(&self) -> Result<Vec<(usize, usize)>> {
        Ok(self
            .param_specs()?
            .iter()
            .map(|specs| {
                specs.iter().fold((0, 0), |(w, b), s| {
                    if s.buffer {
                        (w, b + s.numel())
                    } else {
                        (w + s.numel(), b)
                    }
                })
            })
            .collect())
    }

    pub fn total_weights(&self) -> Result<usize> {
        Ok(self.param_counts()?.iter().map(|c| c.0).sum())
    }

    /// Keras-style one-line-per-layer summary.
    pub fn summary(&self) -> Result<String> {
        let shapes = self.infer_shapes()?;
        let counts = self.param_counts()?;
        let mut out = String::new();
        for ((node, shape), (w, b)) in self.nodes.iter().zip(&shapes).zip(&counts) {
            out.push_str(&format!(
                "{:<28} {:<18} {:<18} {:>10}\n",
                node.name,
                node.op.kind(),
                format!("{shape:?}"),
                w + b
            ));
        }
        Ok(out)
    }
}

impl fmt::Display for LayerGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.summary() {
            Ok(s) => f.write_str(&s),
            Err(e) => write!(f, "<invalid graph: {e}>"),
        }
    }
}

fn layer_err(node: &Node, reason: impl Into<String>) -> NnError {
    NnError::Layer {
        layer: node.name.clone(),
        reason: reason.into(),
    }
}

fn spatial<'a>(node: &Node, shape: &'a Shape) -> Result<&'a [usize]> {
    if shape.len() != 3 {
        return Err(layer_err(
            node,
            format!("expects a [h, w, c] feature map, got {shape:?}"),
        ));
    }
    Ok(shape)
}

fn window(
    node: &Node,
    input: &[usize],
    kernel: [usize; 2],
    strides: [usize; 2],
    padding: Padding,
) -> Result<(AxisWindow, AxisWindow)> {
    let rows = padding.resolve(input[0], kernel[0], strides[0]);
    let cols = padding.resolve(input[1], kernel[1], strides[1]);
    match (rows, cols) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(layer_err(
            node,
            format!(
                "window {kernel:?} stride {strides:?} does not fit input {}x{}",
                input[0], input[1]
            ),
        )),
    }
}

fn output_shape(node: &Node, ins: &[&Shape]) -> Result<Shape> {
    let first = ins[0];
    match &node.op {
        Op::Input => unreachable!("input handled by caller"),
        Op::Conv2d {
            filters,
            kernel,
            strides,
            padding,
            ..
        }
        | Op::SeparableConv2d {
            filters,
            kernel,
            strides,
            padding,
            ..
        } => {
            let s = spatial(node, first)?;
            if *filters == 0 {
                return Err(layer_err(node, "zero filters"));
            }
            let (r, c) = window(node, s, *kernel, *strides, *padding)?;
            Ok(vec![r.output, c.output, *filters])
        }
        Op::MaxPool2d {
            pool,
            strides,
            padding,
        }
        | Op::AvgPool2d {
            pool,
            strides,
            padding,
        } => {
            let s = spatial(node, first)?;
            let (r, c) = window(node, s, *pool, *strides, *padding)?;
            Ok(vec![r.output, c.output, s[2]])
        }
        Op::BatchNorm { .. } | Op::Activation { .. } | Op::Dropout { .. } => {
            if let Op::Dropout { rate } = node.op {
                if !(0.0..1.0).contains(&rate) {
                    return Err(layer_err(node, format!("dropout rate {rate} outside [0, 1)")));
                }
            }
            if let Op::Activation {
                activation: Activation::Softmax,
            } = node.op
            {
                if first.len() != 1 {
                    return Err(layer_err(node, "softmax needs a vector input"));
                }
            }
            Ok(first.clone())
        }
        Op::GlobalAvgPool => {
            let s = spatial(node, first)?;
            Ok(vec![s[2]])
        }
        Op::ZeroPad2d { padding } => {
            let s = spatial(node, first)?;
            Ok(vec![s[0] + padding[0] + padding[1], s[1] + padding[2] + padding[3], s[2]])
        }
        Op::Flatten => Ok(vec![first.iter().product()]),
        Op::Dense { units, .. } => {
            if first.len() != 1 {
                return Err(layer_err(
                    node,
                    format!("dense layer needs a vector input, got {first:?} (missing flatten?)"),
                ));
            }
            if *units == 0 {
                return Err(layer_err(node, "zero units"));
            }
            Ok(vec![*units])
        }
        Op::Add => {
            if ins.iter().any(|s| *s != first) {
                return Err(layer_err(node, format!("add of mismatched shapes {ins:?}")));
            }
            Ok(first.clone())
        }
        Op::Concat => {
            let s = spatial(node, first)?;
            let mut channels = 0;
            for other in ins {
                let o = spatial(node, other)?;
                if o[..2] != s[..2] {
                    return Err(layer_err(
                        node,
                        format!("concat of mismatched spatial shapes {ins:?}"),
                    ));
                }
                channels += o[2];
            }
            Ok(vec![s[0], s[1], channels])
        }
    }
}

fn node_params(op: &Op, input: &[usize]) -> Vec<ParamSpec> {
    let channels = input.last().copied().unwrap_or(0);
    match op {
        Op::Conv2d {
            filters,
            kernel,
            use_bias,
            ..
        } => {
            let mut p = vec![ParamSpec::weight(
                "kernel",
                vec![kernel[0], kernel[1], channels, *filters],
            )];
            if *use_bias {
                p.push(ParamSpec::weight("bias", vec![*filters]));
            }
            p
        }
        Op::SeparableConv2d {
            filters,
            kernel,
            use_bias,
            ..
        } => {
            let mut p = vec![
                ParamSpec::weight("depthwise_kernel", vec![kernel[0], kernel[1], channels, 1]),
                ParamSpec::weight("pointwise_kernel", vec![1, 1, channels, *filters]),
            ];
            if *use_bias {
                p.push(ParamSpec::weight("bias", vec![*filters]));
            }
            p
        }
        Op::BatchNorm { scale, center, .. } => {
            let mut p = Vec::new();
            if *scale {
                p.push(ParamSpec::weight("gamma", vec![channels]));
            }
            if *center {
                p.push(ParamSpec::weight("beta", vec![channels]));
            }
            p.push(ParamSpec::buffer("moving_mean", vec![channels]));
            p.push(ParamSpec::buffer("moving_variance", vec![channels]));
            p
        }
        Op::Dense {
            units, use_bias, ..
        } => {
            let mut p = vec![ParamSpec::weight("kernel", vec![channels, *units])];
            if *use_bias {
                p.push(ParamSpec::weight("bias", vec![*units]));
            }
            p
        }
        _ => Vec::new(),
    }
}

/// Incremental construction of a [`LayerGraph`].
#[derive(Debug)]
pub struct GraphBuilder {
    graph: LayerGraph,
}

impl GraphBuilder {
    pub fn new(input_shape: [usize; 3]) -> Self {
        Self {
            graph: LayerGraph {
                input_shape,
                nodes: vec![Node {
                    name: "input".into(),
                    op: Op::Input,
                    inputs: Vec::new(),
                }],
            },
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn last(&self) -> NodeId {
        self.graph.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.graph.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn push(&mut self, name: impl Into<String>, op: Op, inputs: &[NodeId]) -> NodeId {
        self.graph.nodes.push(Node {
            name: name.into(),
            op,
            inputs: inputs.to_vec(),
        });
        self.last()
    }

    /// Appends a node fed by the most recently added node.
    pub fn chain(&mut self, name: impl Into<String>, op: Op) -> NodeId {
        let prev = self.last();
        self.push(name, op, &[prev])
    }

    pub fn build(self) -> Result<LayerGraph> {
        self.graph.infer_shapes()?;
        Ok(self.graph)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_matches_tensorflow_rule() {
        // 7 wide, 3 tap, stride 2: out 4, total pad 2 -> (1, 1)
        let w = Padding::Same.resolve(7, 3, 2).unwrap();
        assert_eq!((w.output, w.pad_before, w.pad_after), (4, 1, 1));
        // even input: extra padding goes after
        let w = Padding::Same.resolve(8, 3, 2).unwrap();
        assert_eq!((w.output, w.pad_before, w.pad_after), (4, 0, 1));
        let w = Padding::Same.resolve(5, 7, 1).unwrap();
        assert_eq!((w.output, w.pad_before, w.pad_after), (5, 3, 3));
        assert!(Padding::Valid.resolve(2, 3, 1).is_none());
        assert_eq!(Padding::Valid.resolve(224, 3, 1).unwrap().output, 222);
    }

    #[test]
    fn builder_rejects_dense_on_feature_map() {
        let mut b = GraphBuilder::new([8, 8, 3]);
        b.chain("d", Op::dense(2, Activation::Softmax));
        let err = b.build().unwrap_err();
        assert!(err.to_string().contains("missing flatten"), "{err}");
    }

    #[test]
    fn rejects_forward_references_and_duplicates() {
        let mut g = GraphBuilder::new([4, 4, 1]).build().unwrap();
        g.nodes.push(Node {
            name: "x".into(),
            op: Op::Flatten,
            inputs: vec![1],
        });
        assert!(g.infer_shapes().is_err());
        g.nodes[1].inputs = vec![0];
        g.nodes.push(Node {
            name: "x".into(),
            op: Op::Flatten,
            inputs: vec![0],
        });
        assert!(g.infer_shapes().unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn concat_and_params() {
        let mut b = GraphBuilder::new([6, 6, 4]);
        let a = b.push(
            "a",
            Op::Conv2d {
                filters: 3,
                kernel: [1, 7],
                strides: [1, 1],
                padding: Padding::Same,
                use_bias: false,
                activation: Activation::Relu,
            },
            &[0],
        );
        let p = b.push(
            "p",
            Op::AvgPool2d {
                pool: [3, 3],
                strides: [1, 1],
                padding: Padding::Same,
            },
            &[0],
        );
        b.push("cat", Op::Concat, &[a, p]);
        let g = b.build().unwrap();
        let shapes = g.infer_shapes().unwrap();
        assert_eq!(shapes[3], vec![6, 6, 7]);
        assert_eq!(g.param_counts().unwrap()[1], (7 * 4 * 3, 0));
    }

    #[test]
    fn topology_json_round_trip() {
        let mut b = GraphBuilder::new([8, 8, 3]);
        b.chain("c", Op::conv(4, 3, Activation::Relu));
        b.chain("bn", Op::batch_norm());
        b.chain("gap", Op::GlobalAvgPool);
        b.chain("out", Op::dense(2, Activation::Softmax));
        let g = b.build().unwrap();
        let text = serde_json::to_string(&g).unwrap();
        assert!(text.contains("\"kind\":\"conv2d\""));
        assert_eq!(LayerGraph::from_json(&text).unwrap(), g);
        assert_eq!(g.output_units().unwrap(), 2);
    }
}
