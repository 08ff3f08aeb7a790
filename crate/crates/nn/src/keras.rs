//! Translation between [`LayerGraph`] and the Keras functional-model config
//! used as `modelTopology` by browser layers-model loaders.

use std::collections::HashMap;

use serde_json::{json, Value};

use crate::error::{NnError, Result};
use crate::graph::{Activation, LayerGraph, Node, Op, Padding};

const KERAS_VERSION: &str = "2.15.0";

fn padding_name(p: Padding) -> &'static str {
    match p {
        Padding::Valid => "valid",
        Padding::Same => "same",
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Linear => "linear",
        Activation::Relu => "relu",
        Activation::Softmax => "softmax",
    }
}

fn layer_config(node: &Node) -> (&'static str, Value) {
    let name = &node.name;
    match &node.op {
        Op::Input => unreachable!("input layer is emitted separately"),
        Op::Conv2d {
            filters,
            kernel,
            strides,
            padding,
            use_bias,
            activation,
        } => (
            "Conv2D",
            json!({
                "name": name, "trainable": true, "dtype": "float32",
                "filters": filters, "kernel_size": kernel, "strides": strides,
                "padding": padding_name(*padding), "data_format": "channels_last",
                "dilation_rate": [1, 1], "activation": activation_name(*activation),
                "use_bias": use_bias,
            }),
        ),
        Op::SeparableConv2d {
            filters,
            kernel,
            strides,
            padding,
            use_bias,
            activation,
        } => (
            "SeparableConv2D",
            json!({
                "name": name, "trainable": true, "dtype": "float32",
                "filters": filters, "kernel_size": kernel, "strides": strides,
                "padding": padding_name(*padding), "data_format": "channels_last",
                "dilation_rate": [1, 1], "depth_multiplier": 1,
                "activation": activation_name(*activation), "use_bias": use_bias,
            }),
        ),
        Op::BatchNorm {
            epsilon,
            momentum,
            scale,
            center,
        } => (
            "BatchNormalization",
            json!({
                "name": name, "trainable": true, "dtype": "float32", "axis": -1,
                "momentum": momentum, "epsilon": epsilon, "center": center, "scale": scale,
            }),
        ),
        Op::Activation { activation } => (
            "Activation",
            json!({"name": name, "trainable": true, "dtype": "float32",
                   "activation": activation_name(*activation)}),
        ),
        Op::MaxPool2d {
            pool,
            strides,
            padding,
        } => (
            "MaxPooling2D",
            json!({"name": name, "trainable": true, "dtype": "float32", "pool_size": pool,
                   "strides": strides, "padding": padding_name(*padding),
                   "data_format": "channels_last"}),
        ),
        Op::AvgPool2d {
            pool,
            strides,
            padding,
        } => (
            "AveragePooling2D",
            json!({"name": name, "trainable": true, "dtype": "float32", "pool_size": pool,
                   "strides": strides, "padding": padding_name(*padding),
                   "data_format": "channels_last"}),
        ),
        Op::GlobalAvgPool => (
            "GlobalAveragePooling2D",
            json!({"name": name, "trainable": true, "dtype": "float32",
                   "data_format": "channels_last"}),
        ),
        Op::ZeroPad2d { padding } => (
            "ZeroPadding2D",
            json!({"name": name, "trainable": true, "dtype": "float32",
                   "padding": [[padding[0], padding[1]], [padding[2], padding[3]]],
                   "data_format": "channels_last"}),
        ),
        Op::Flatten => (
            "Flatten",
            json!({"name": name, "trainable": true, "dtype": "float32",
                   "data_format": "channels_last"}),
        ),
        Op::Dense {
            units,
            activation,
            use_bias,
        } => (
            "Dense",
            json!({"name": name, "trainable": true, "dtype": "float32", "units": units,
                   "activation": activation_name(*activation), "use_bias": use_bias}),
        ),
        Op::Dropout { rate } => (
            "Dropout",
            json!({"name": name, "trainable": true, "dtype": "float32", "rate": rate}),
        ),
        Op::Add => (
            "Add",
            json!({"name": name, "trainable": true, "dtype": "float32"}),
        ),
        Op::Concat => (
            "Concatenate",
            json!({"name": name, "trainable": true, "dtype": "float32", "axis": -1}),
        ),
    }
}

/// Renders `graph` as a Keras functional-model topology.
pub fn to_keras(graph: &LayerGraph, model_name: &str) -> Value {
    let [h, w, c] = graph.input_shape;
    let input_name = &graph.nodes[0].name;
    let mut layers = vec![json!({
        "class_name": "InputLayer",
        "name": input_name,
        "config": {
            "batch_input_shape": [null, h, w, c],
            "dtype": "float32",
            "sparse": false,
            "name": input_name,
        },
        "inbound_nodes": [],
    })];
    for node in &graph.nodes[1..] {
        let (class, config) = layer_config(node);
        let inbound: Vec<Value> = node
            .inputs
            .iter()
            .map(|&i| json!([graph.nodes[i].name, 0, 0, {}]))
            .collect();
        layers.push(json!({
            "class_name": class,
            "name": node.name,
            "config": config,
            "inbound_nodes": [inbound],
        }));
    }
    let output = &graph.nodes[graph.output()].name;
    json!({
        "class_name": "Functional",
        "config": {
            "name": model_name,
            "layers": layers,
            "input_layers": [[input_name, 0, 0]],
            "output_layers": [[output, 0, 0]],
        },
        "keras_version": KERAS_VERSION,
        "backend": "tensorflow",
    })
}

fn bad(layer: &str, reason: impl Into<String>) -> NnError {
    NnError::Layer {
        layer: layer.to_string(),
        reason: reason.into(),
    }
}

fn field<'a>(cfg: &'a Value, layer: &str, key: &str) -> Result<&'a Value> {
    cfg.get(key)
        .ok_or_else(|| bad(layer, format!("missing config field `{key}`")))
}

fn usize_field(cfg: &Value, layer: &str, key: &str) -> Result<usize> {
    field(cfg, layer, key)?
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| bad(layer, format!("`{key}` is not a non-negative integer")))
}

fn f32_field(cfg: &Value, layer: &str, key: &str, default: f32) -> Result<f32> {
    match cfg.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_f64()
            .map(|v| v as f32)
            .ok_or_else(|| bad(layer, format!("`{key}` is not a number"))),
    }
}

fn bool_field(cfg: &Value, layer: &str, key: &str, default: bool) -> Result<bool> {
    match cfg.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_bool()
            .ok_or_else(|| bad(layer, format!("`{key}` is not a boolean"))),
    }
}

/// Accepts either a scalar or a pair.
fn pair_field(cfg: &Value, layer: &str, key: &str, default: Option<[usize; 2]>) -> Result<[usize; 2]> {
    let Some(v) = cfg.get(key).filter(|v| !v.is_null()) else {
        return default.ok_or_else(|| bad(layer, format!("missing config field `{key}`")));
    };
    if let Some(n) = v.as_u64() {
        return Ok([n as usize; 2]);
    }
    match v.as_array().map(|a| a.iter().map(Value::as_u64).collect::<Vec<_>>()) {
        Some(a) if a.len() == 2 && a.iter().all(Option::is_some) => {
            Ok([a[0].unwrap() as usize, a[1].unwrap() as usize])
        }
        _ => Err(bad(layer, format!("`{key}` must be an integer or a pair"))),
    }
}

fn padding_field(cfg: &Value, layer: &str) -> Result<Padding> {
    match cfg.get("padding").and_then(Value::as_str).unwrap_or("valid") {
        "valid" => Ok(Padding::Valid),
        "same" => Ok(Padding::Same),
        other => Err(bad(layer, format!("unsupported padding `{other}`"))),
    }
}

fn activation_field(cfg: &Value, layer: &str) -> Result<Activation> {
    match cfg.get("activation").and_then(Value::as_str).unwrap_or("linear") {
        "linear" => Ok(Activation::Linear),
        "relu" => Ok(Activation::Relu),
        "softmax" => Ok(Activation::Softmax),
        other => Err(bad(layer, format!("unsupported activation `{other}`"))),
    }
}

fn check_unit(cfg: &Value, layer: &str, key: &str) -> Result<()> {
    if cfg.get(key).is_some() && pair_field(cfg, layer, key, None)? != [1, 1] {
        return Err(bad(layer, format!("`{key}` other than 1 is not supported")));
    }
    Ok(())
}

fn check_channels_last(cfg: &Value, layer: &str) -> Result<()> {
    match cfg.get("data_format").and_then(Value::as_str) {
        None | Some("channels_last") => Ok(()),
        Some(other) => Err(bad(layer, format!("unsupported data format `{other}`"))),
    }
}

fn parse_op(class: &str, cfg: &Value, layer: &str) -> Result<Op> {
    check_channels_last(cfg, layer)?;
    let op = match class {
        "Conv2D" => {
            check_unit(cfg, layer, "dilation_rate")?;
            Op::Conv2d {
                filters: usize_field(cfg, layer, "filters")?,
                kernel: pair_field(cfg, layer, "kernel_size", None)?,
                strides: pair_field(cfg, layer, "strides", Some([1, 1]))?,
                padding: padding_field(cfg, layer)?,
                use_bias: bool_field(cfg, layer, "use_bias", true)?,
                activation: activation_field(cfg, layer)?,
            }
        }
        "SeparableConv2D" => {
            check_unit(cfg, layer, "dilation_rate")?;
            if cfg.get("depth_multiplier").and_then(Value::as_u64).unwrap_or(1) != 1 {
                return Err(bad(layer, "depth multiplier other than 1 is not supported"));
            }
            Op::SeparableConv2d {
                filters: usize_field(cfg, layer, "filters")?,
                kernel: pair_field(cfg, layer, "kernel_size", None)?,
                strides: pair_field(cfg, layer, "strides", Some([1, 1]))?,
                padding: padding_field(cfg, layer)?,
                use_bias: bool_field(cfg, layer, "use_bias", true)?,
                activation: activation_field(cfg, layer)?,
            }
        }
        "BatchNormalization" => {
            let axis = cfg.get("axis").cloned().unwrap_or(json!(-1));
            if axis != json!(-1) && axis != json!(3) && axis != json!([3]) {
                return Err(bad(layer, "only channel-axis batch normalization is supported"));
            }
            Op::BatchNorm {
                epsilon: f32_field(cfg, layer, "epsilon", 1e-3)?,
                momentum: f32_field(cfg, layer, "momentum", 0.99)?,
                scale: bool_field(cfg, layer, "scale", true)?,
                center: bool_field(cfg, layer, "center", true)?,
            }
        }
        "Activation" => Op::Activation {
            activation: activation_field(cfg, layer)?,
        },
        "ReLU" => Op::Activation {
            activation: Activation::Relu,
        },
        "Softmax" => Op::Activation {
            activation: Activation::Softmax,
        },
        "MaxPooling2D" | "AveragePooling2D" => {
            let pool = pair_field(cfg, layer, "pool_size", Some([2, 2]))?;
            let strides = pair_field(cfg, layer, "strides", Some(pool))?;
            let padding = padding_field(cfg, layer)?;
            if class == "MaxPooling2D" {
                Op::MaxPool2d {
                    pool,
                    strides,
                    padding,
                }
            } else {
                Op::AvgPool2d {
                    pool,
                    strides,
                    padding,
                }
            }
        }
        "GlobalAveragePooling2D" => {
            if bool_field(cfg, layer, "keepdims", false)? {
                return Err(bad(layer, "keepdims is not supported"));
            }
            Op::GlobalAvgPool
        }
        "ZeroPadding2D" => {
            let p = field(cfg, layer, "padding")?;
            let padding = if let Some(n) = p.as_u64() {
                [n as usize; 4]
            } else {
                let rows: Vec<[usize; 2]> = p
                    .as_array()
                    .ok_or_else(|| bad(layer, "malformed padding"))?
                    .iter()
                    .map(|v| {
                        if let Some(n) = v.as_u64() {
                            Ok([n as usize; 2])
                        } else {
                            let a = v.as_array().ok_or_else(|| bad(layer, "malformed padding"))?;
                            match (a.first().and_then(Value::as_u64), a.get(1).and_then(Value::as_u64)) {
                                (Some(x), Some(y)) if a.len() == 2 => Ok([x as usize, y as usize]),
                                _ => Err(bad(layer, "malformed padding")),
                            }
                        }
                    })
                    .collect::<Result<_>>()?;
                if rows.len() != 2 {
                    return Err(bad(layer, "malformed padding"));
                }
                [rows[0][0], rows[0][1], rows[1][0], rows[1][1]]
            };
            Op::ZeroPad2d { padding }
        }
        "Flatten" => Op::Flatten,
        "Dense" => Op::Dense {
            units: usize_field(cfg, layer, "units")?,
            activation: activation_field(cfg, layer)?,
            use_bias: bool_field(cfg, layer, "use_bias", true)?,
        },
        "Dropout" => Op::Dropout {
            rate: f32_field(cfg, layer, "rate", 0.0)?,
        },
        "Add" => Op::Add,
        "Concatenate" => {
            let axis = cfg.get("axis").and_then(Value::as_i64).unwrap_or(-1);
            if axis != -1 && axis != 3 {
                return Err(bad(layer, "only channel concatenation is supported"));
            }
            Op::Concat
        }
        other => return Err(bad(layer, format!("unsupported layer class `{other}`"))),
    };
    Ok(op)
}

fn inbound_names(layer: &Value, name: &str) -> Result<Vec<String>> {
    let nodes = layer
        .get("inbound_nodes")
        .and_then(Value::as_array)
        .ok_or_else(|| bad(name, "missing inbound nodes"))?;
    match nodes.as_slice() {
        [] => Ok(Vec::new()),
        [single] => single
            .as_array()
            .ok_or_else(|| bad(name, "malformed inbound nodes"))?
            .iter()
            .map(|edge| {
                edge.get(0)
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| bad(name, "malformed inbound edge"))
            })
            .collect(),
        _ => Err(bad(name, "shared layers are not supported")),
    }
}

/// Parses a Keras functional topology into a [`LayerGraph`]. Layers must be
/// listed after their inputs, as Keras serializes them.
pub fn from_keras(topology: &Value) -> Result<LayerGraph> {
    let config = topology
        .get("config")
        .ok_or_else(|| NnError::Graph("topology lacks `config`".into()))?;
    let layers = config
        .get("layers")
        .and_then(Value::as_array)
        .ok_or_else(|| NnError::Graph("topology lacks a layer list".into()))?;
    let mut nodes: Vec<Node> = Vec::with_capacity(layers.len());
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut input_shape = None;
    for layer in layers {
        let class = layer
            .get("class_name")
            .and_then(Value::as_str)
            .ok_or_else(|| NnError::Graph("layer without class_name".into()))?;
        let cfg = layer
            .get("config")
            .ok_or_else(|| NnError::Graph("layer without config".into()))?;
        let name = layer
            .get("name")
            .or_else(|| cfg.get("name"))
            .and_then(Value::as_str)
            .ok_or_else(|| NnError::Graph(format!("unnamed {class} layer")))?
            .to_string();
        if class == "InputLayer" {
            if input_shape.is_some() {
                return Err(NnError::Graph("multiple input layers".into()));
            }
            let shape = cfg
                .get("batch_input_shape")
                .or_else(|| cfg.get("batch_shape"))
                .and_then(Value::as_array)
                .ok_or_else(|| bad(&name, "input layer lacks batch_input_shape"))?;
            let dims: Vec<usize> = shape[1..]
                .iter()
                .map(|v| v.as_u64().map(|v| v as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| bad(&name, "input shape must be fully defined"))?;
            let [h, w, c] = dims[..] else {
                return Err(bad(&name, "input must be height x width x channels"));
            };
            input_shape = Some([h, w, c]);
            if !nodes.is_empty() {
                return Err(NnError::Graph("input layer must come first".into()));
            }
            index.insert(name.clone(), 0);
            nodes.push(Node {
                name,
                op: Op::Input,
                inputs: Vec::new(),
            });
            continue;
        }
        let op = parse_op(class, cfg, &name)?;
        let inputs = inbound_names(layer, &name)?
            .iter()
            .map(|n| {
                index
                    .get(n)
                    .copied()
                    .ok_or_else(|| bad(&name, format!("input `{n}` is not defined earlier")))
            })
            .collect::<Result<Vec<_>>>()?;
        index.insert(name.clone(), nodes.len());
        nodes.push(Node { name, op, inputs });
    }
    let input_shape = input_shape.ok_or_else(|| NnError::Graph("topology has no input layer".into()))?;
    if let Some(out) = config
        .get("output_layers")
        .and_then(|o| o.get(0))
        .and_then(|o| o.get(0))
        .and_then(Value::as_str)
    {
        if nodes.last().map(|n| n.name.as_str()) != Some(out) {
            return Err(NnError::Graph(format!("output layer `{out}` must be the last layer")));
        }
    }
    let graph = LayerGraph { input_shape, nodes };
    graph.infer_shapes()?;
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;

    #[test]
    fn round_trips_every_op() {
        let mut b = GraphBuilder::new([9, 9, 3]);
        let x = b.chain("pad", Op::ZeroPad2d { padding: [1, 0, 2, 1] });
        let a = b.push("c1", Op::conv(4, 3, Activation::Relu), &[x]);
        let s = b.push(
            "s1",
            Op::SeparableConv2d {
                filters: 4,
                kernel: [3, 3],
                strides: [1, 1],
                padding: Padding::Same,
                use_bias: false,
                activation: Activation::Linear,
            },
            &[a],
        );
        let bn = b.push("bn", Op::batch_norm(), &[s]);
        let sum = b.push("sum", Op::Add, &[a, bn]);
        let cat = b.push("cat", Op::Concat, &[sum, a]);
        b.push(
            "avg",
            Op::AvgPool2d {
                pool: [3, 3],
                strides: [2, 2],
                padding: Padding::Same,
            },
            &[cat],
        );
        b.chain("mp", Op::max_pool(2));
        b.chain("act", Op::Activation { activation: Activation::Relu });
        b.chain("flat", Op::Flatten);
        b.chain("drop", Op::dropout(0.5));
        b.chain("out", Op::dense(2, Activation::Softmax));
        let g = b.build().unwrap();
        let k = to_keras(&g, "m");
        assert_eq!(from_keras(&k).unwrap(), g);
    }

    #[test]
    fn unsupported_layer_names_the_layer() {
        let g = {
            let mut b = GraphBuilder::new([4, 4, 1]);
            b.chain("flat", Op::Flatten);
            b.chain("out", Op::dense(2, Activation::Softmax));
            b.build().unwrap()
        };
        let mut k = to_keras(&g, "m");
        k["config"]["layers"][1]["class_name"] = json!("Lambda");
        let err = from_keras(&k).unwrap_err();
        assert!(err.to_string().contains("`flat`"), "{err}");
        assert!(err.to_string().contains("Lambda"), "{err}");
    }
}
