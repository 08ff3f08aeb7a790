//! The two hand-built convolutional networks.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use plasmodium_nn::{Activation, GraphBuilder, LayerGraph, NodeId, Op};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::preprocess::PreprocessProfile;

pub const CNN_A_INPUT: [usize; 3] = [128, 128, 3];
pub const CNN_B_INPUT: [usize; 3] = [224, 224, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CnnArch {
    A,
    B,
}

impl CnnArch {
    pub fn name(self) -> &'static str {
        match self {
            CnnArch::A => "cnn-a",
            CnnArch::B => "cnn-b",
        }
    }

    pub fn input_shape(self) -> [usize; 3] {
        match self {
            CnnArch::A => CNN_A_INPUT,
            CnnArch::B => CNN_B_INPUT,
        }
    }

    pub fn profile(self) -> PreprocessProfile {
        let [h, w, _] = self.input_shape();
        PreprocessProfile::new(h, w)
    }

    pub fn build(self, dropout: &DropoutRates) -> Result<LayerGraph> {
        match self {
            CnnArch::A => build_cnn_a_with(dropout),
            CnnArch::B => build_cnn_b_with(dropout),
        }
    }
}

impl fmt::Display for CnnArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CnnArch {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "cnn-a" => Ok(CnnArch::A),
            "b" | "cnn-b" => Ok(CnnArch::B),
            other => Err(CoreError::Config(format!("unknown CNN architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutRates {
    pub conv: f32,
    pub dense: f32,
}

impl Default for DropoutRates {
    fn default() -> Self {
        Self { conv: 0.25, dense: 0.5 }
    }
}

/// Layer names the way a fresh Keras session hands them out: the first
/// `conv2d`, then `conv2d_1`, `conv2d_2`, ...
#[derive(Debug, Default)]
pub(crate) struct KerasNames {
    seen: HashMap<&'static str, usize>,
}

impl KerasNames {
    pub(crate) fn next(&mut self, base: &'static str) -> String {
        let n = self.seen.entry(base).or_insert(0);
        let name = if *n == 0 {
            base.to_string()
        } else {
            format!("{base}_{n}")
        };
        *n += 1;
        name
    }
}

/// Appends `op` under its Keras default name, fed by `inputs`.
pub(crate) fn keras_node(
    g: &mut GraphBuilder,
    names: &mut KerasNames,
    op: Op,
    inputs: &[NodeId],
) -> NodeId {
    let base = match &op {
        Op::Conv2d { .. } => "conv2d",
        Op::SeparableConv2d { .. } => "separable_conv2d",
        Op::BatchNorm { .. } => "batch_normalization",
        Op::Activation { .. } => "activation",
        Op::MaxPool2d { .. } => "max_pooling2d",
        Op::AvgPool2d { .. } => "average_pooling2d",
        Op::GlobalAvgPool => "global_average_pooling2d",
        Op::ZeroPad2d { .. } => "zero_padding2d",
        Op::Flatten => "flatten",
        Op::Dense { .. } => "dense",
        Op::Dropout { .. } => "dropout",
        Op::Add => "add",
        Op::Concat => "concatenate",
        Op::Input => "input",
    };
    let name = names.next(base);
    g.push(name, op, inputs)
}

fn chain(g: &mut GraphBuilder, names: &mut KerasNames, op: Op) -> NodeId {
    let prev = g.last();
    keras_node(g, names, op, &[prev])
}

/// Three conv / batch-norm / max-pool / dropout blocks (32, 64, 128
/// filters) and a 256-unit dense layer, on 128x128 RGB input.
pub fn build_cnn_a() -> Result<LayerGraph> {
    build_cnn_a_with(&DropoutRates::default())
}

pub fn build_cnn_a_with(dropout: &DropoutRates) -> Result<LayerGraph> {
    let mut g = GraphBuilder::new(CNN_A_INPUT);
    let mut names = KerasNames::default();
    for filters in [32, 64, 128] {
        chain(&mut g, &mut names, Op::conv(filters, 3, Activation::Relu));
        chain(&mut g, &mut names, Op::batch_norm());
        chain(&mut g, &mut names, Op::max_pool(2));
        chain(&mut g, &mut names, Op::dropout(dropout.conv));
    }
    chain(&mut g, &mut names, Op::Flatten);
    chain(&mut g, &mut names, Op::dense(256, Activation::Relu));
    chain(&mut g, &mut names, Op::batch_norm());
    chain(&mut g, &mut names, Op::dropout(dropout.dense));
    chain(&mut g, &mut names, Op::dense(2, Activation::Softmax));
    Ok(g.build()?)
}

/// Zero-padded 32-filter group, a 64-filter group of three convolutions,
/// one 128-filter convolution and a 256-unit dense layer, on 224x224 RGB.
pub fn build_cnn_b() -> Result<LayerGraph> {
    build_cnn_b_with(&DropoutRates::default())
}

pub fn build_cnn_b_with(dropout: &DropoutRates) -> Result<LayerGraph> {
    let mut g = GraphBuilder::new(CNN_B_INPUT);
    let mut names = KerasNames::default();
    let conv = |f| Op::conv(f, 3, Activation::Relu);
    chain(&mut g, &mut names, conv(32));
    chain(&mut g, &mut names, Op::ZeroPad2d { padding: [1; 4] });
    chain(&mut g, &mut names, conv(32));
    chain(&mut g, &mut names, conv(32));
    chain(&mut g, &mut names, Op::max_pool(2));
    chain(&mut g, &mut names, Op::dropout(dropout.conv));
    for _ in 0..3 {
        chain(&mut g, &mut names, conv(64));
    }
    chain(&mut g, &mut names, Op::max_pool(2));
    chain(&mut g, &mut names, Op::dropout(dropout.conv));
    chain(&mut g, &mut names, conv(128));
    chain(&mut g, &mut names, Op::max_pool(2));
    chain(&mut g, &mut names, Op::dropout(dropout.conv));
    chain(&mut g, &mut names, Op::Flatten);
    chain(&mut g, &mut names, Op::dense(256, Activation::Relu));
    chain(&mut g, &mut names, Op::dropout(dropout.dense));
    chain(&mut g, &mut names, Op::dense(2, Activation::Softmax));
    Ok(g.build()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keras_names_count_per_kind() {
        let mut n = KerasNames::default();
        assert_eq!(n.next("conv2d"), "conv2d");
        assert_eq!(n.next("dense"), "dense");
        assert_eq!(n.next("conv2d"), "conv2d_1");
    }

    #[test]
    fn arch_parses_short_and_long_names() {
        assert_eq!("a".parse::<CnnArch>().unwrap(), CnnArch::A);
        assert_eq!("CNN-B".parse::<CnnArch>().unwrap(), CnnArch::B);
        assert!("c".parse::<CnnArch>().is_err());
    }
}
