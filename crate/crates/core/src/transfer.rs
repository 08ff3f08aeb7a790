//! Transfer learning over VGG19, InceptionV3 and Xception backbones with a
//! small classification head, under three freeze schedules.
//!
//! Layer names follow what a fresh Keras session assigns, so converted
//! ImageNet snapshots load by name.

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use plasmodium_nn::{io, Activation, GraphBuilder, LayerGraph, Model, NodeId, Op, Padding};
use serde::{Deserialize, Serialize};

use crate::cnn_models::{keras_node, KerasNames};
use crate::error::{CoreError, Result};
use crate::metrics::EvaluationReport;
use crate::preprocess::PreprocessProfile;
use crate::train::{evaluate, train_model, ImageSource, TrainConfig, TrainingHistory};

pub const TRANSFER_INPUT: [usize; 3] = [128, 128, 3];
pub const HEAD_UNITS: usize = 256;
pub const HEAD_DROPOUT: f32 = 0.5;
pub const INCREMENTAL_PHASE_EPOCHS: [usize; 2] = [15, 35];
pub const INCREMENTAL_LR_DIVISOR: f32 = 10.0;
pub const WEIGHTS_ENV: &str = "PLASMODIUM_WEIGHTS_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Vgg19,
    InceptionV3,
    Xception,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Vgg19, Backbone::InceptionV3, Backbone::Xception];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Vgg19 => "vgg19",
            Backbone::InceptionV3 => "inceptionv3",
            Backbone::Xception => "xception",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Backbone::Vgg19 => "VGG19",
            Backbone::InceptionV3 => "InceptionV3",
            Backbone::Xception => "Xception",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "vgg19" => Ok(Backbone::Vgg19),
            "inceptionv3" => Ok(Backbone::InceptionV3),
            "xception" => Ok(Backbone::Xception),
            other => Err(CoreError::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Backbone frozen, head trained.
    Frozen,
    /// Head first, then the head plus the last two backbone blocks.
    Incremental,
    /// Every layer trained, starting from the pretrained weights.
    Full,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Frozen, Regime::Incremental, Regime::Full];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Frozen => "frozen",
            Regime::Incremental => "incremental",
            Regime::Full => "full",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frozen" => Ok(Regime::Frozen),
            "incremental" => Ok(Regime::Incremental),
            "full" => Ok(Regime::Full),
            other => Err(CoreError::Config(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    /// Node indices in the full graph.
    pub nodes: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub backbone: Backbone,
    pub weights: String,
    /// Consecutive, covering every backbone node (all nodes but the input
    /// and the head).
    pub blocks: Vec<Block>,
    pub head: Range<usize>,
}

impl BackboneSpec {
    pub fn backbone_nodes(&self) -> Range<usize> {
        1..self.head.start
    }

    /// The blocks unfrozen in the second incremental phase.
    pub fn last_two_blocks(&self) -> &[Block] {
        &self.blocks[self.blocks.len().saturating_sub(2)..]
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Every backbone node in exactly one block, in order.
    pub fn check_coverage(&self, graph_len: usize) -> Result<()> {
        let mut next = 1;
        for b in &self.blocks {
            if b.nodes.start != next || b.nodes.is_empty() {
                return Err(CoreError::Config(format!(
                    "{} block `{}` does not continue at node {next}",
                    self.backbone, b.name
                )));
            }
            next = b.nodes.end;
        }
        if next != self.head.start || self.head.end != graph_len {
            return Err(CoreError::Config(format!(
                "{} blocks end at node {next}, head spans {:?} of {graph_len} nodes",
                self.backbone, self.head
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferGraph {
    pub graph: LayerGraph,
    pub spec: BackboneSpec,
}

struct Net {
    g: GraphBuilder,
    names: KerasNames,
    blocks: Vec<Block>,
    block_start: usize,
}

impl Net {
    fn new() -> Self {
        Self {
            g: GraphBuilder::new(TRANSFER_INPUT),
            names: KerasNames::default(),
            blocks: Vec::new(),
            block_start: 1,
        }
    }

    fn auto(&mut self, op: Op, inputs: &[NodeId]) -> NodeId {
        keras_node(&mut self.g, &mut self.names, op, inputs)
    }

    fn named(&mut self, name: impl Into<String>, op: Op, inputs: &[NodeId]) -> NodeId {
        self.g.push(name, op, inputs)
    }

    fn end_block(&mut self, name: impl Into<String>) {
        let end = self.g.len();
        self.blocks.push(Block {
            name: name.into(),
            nodes: self.block_start..end,
        });
        self.block_start = end;
    }

    fn finish(mut self, backbone: Backbone) -> Result<TransferGraph> {
        let head_start = self.g.len();
        let features = self.g.last();
        self.auto(Op::GlobalAvgPool, &[features]);
        let x = self.g.last();
        self.auto(Op::dense(HEAD_UNITS, Activation::Relu), &[x]);
        let x = self.g.last();
        self.auto(Op::dropout(HEAD_DROPOUT), &[x]);
        let x = self.g.last();
        self.auto(Op::dense(2, Activation::Softmax), &[x]);
        let head = head_start..self.g.len();
        let graph = self.g.build()?;
        let spec = BackboneSpec {
            backbone,
            weights: "imagenet".into(),
            blocks: self.blocks,
            head,
        };
        spec.check_coverage(graph.len())?;
        Ok(TransferGraph { graph, spec })
    }
}

fn conv(filters: usize, kernel: [usize; 2], strides: usize, padding: Padding, bias: bool, act: Activation) -> Op {
    Op::Conv2d {
        filters,
        kernel,
        strides: [strides, strides],
        padding,
        use_bias: bias,
        activation: act,
    }
}

fn max_pool(pool: usize, stride: usize, padding: Padding) -> Op {
    Op::MaxPool2d {
        pool: [pool, pool],
        strides: [stride, stride],
        padding,
    }
}

fn relu() -> Op {
    Op::Activation {
        activation: Activation::Relu,
    }
}

fn build_vgg19() -> Result<TransferGraph> {
    let mut n = Net::new();
    let mut x = n.g.input();
    for (b, (convs, filters)) in [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)].into_iter().enumerate() {
        let b = b + 1;
        for c in 1..=convs {
            let op = conv(filters, [3, 3], 1, Padding::Same, true, Activation::Relu);
            x = n.named(format!("block{b}_conv{c}"), op, &[x]);
        }
        x = n.named(format!("block{b}_pool"), max_pool(2, 2, Padding::Valid), &[x]);
        n.end_block(format!("block{b}"));
    }
    n.finish(Backbone::Vgg19)
}

/// Bias-free convolution, batch norm without scale, ReLU.
fn conv_bn(n: &mut Net, x: NodeId, filters: usize, kh: usize, kw: usize, strides: usize, padding: Padding) -> NodeId {
    let c = n.auto(conv(filters, [kh, kw], strides, padding, false, Activation::Linear), &[x]);
    let bn = n.auto(
        Op::BatchNorm {
            epsilon: 1e-3,
            momentum: 0.99,
            scale: false,
            center: true,
        },
        &[c],
    );
    n.auto(relu(), &[bn])
}

fn avg_pool_same(n: &mut Net, x: NodeId) -> NodeId {
    n.auto(
        Op::AvgPool2d {
            pool: [3, 3],
            strides: [1, 1],
            padding: Padding::Same,
        },
        &[x],
    )
}

fn build_inception_v3() -> Result<TransferGraph> {
    use Padding::{Same, Valid};
    let mut net = Net::new();
    let n = &mut net;
    let mut x = n.g.input();
    x = conv_bn(n, x, 32, 3, 3, 2, Valid);
    x = conv_bn(n, x, 32, 3, 3, 1, Valid);
    x = conv_bn(n, x, 64, 3, 3, 1, Same);
    x = n.auto(max_pool(3, 2, Valid), &[x]);
    x = conv_bn(n, x, 80, 1, 1, 1, Valid);
    x = conv_bn(n, x, 192, 3, 3, 1, Valid);
    x = n.auto(max_pool(3, 2, Valid), &[x]);
    n.end_block("stem");

    for (i, pool_filters) in [32, 64, 64].into_iter().enumerate() {
        let b1 = conv_bn(n, x, 64, 1, 1, 1, Same);
        let b5 = conv_bn(n, x, 48, 1, 1, 1, Same);
        let b5 = conv_bn(n, b5, 64, 5, 5, 1, Same);
        let b3 = conv_bn(n, x, 64, 1, 1, 1, Same);
        let b3 = conv_bn(n, b3, 96, 3, 3, 1, Same);
        let b3 = conv_bn(n, b3, 96, 3, 3, 1, Same);
        let bp = avg_pool_same(n, x);
        let bp = conv_bn(n, bp, pool_filters, 1, 1, 1, Same);
        x = n.named(format!("mixed{i}"), Op::Concat, &[b1, b5, b3, bp]);
        n.end_block(format!("mixed{i}"));
    }

    let b3 = conv_bn(n, x, 384, 3, 3, 2, Valid);
    let bd = conv_bn(n, x, 64, 1, 1, 1, Same);
    let bd = conv_bn(n, bd, 96, 3, 3, 1, Same);
    let bd = conv_bn(n, bd, 96, 3, 3, 2, Valid);
    let bp = n.auto(max_pool(3, 2, Valid), &[x]);
    x = n.named("mixed3", Op::Concat, &[b3, bd, bp]);
    n.end_block("mixed3");

    for (i, f) in [128, 160, 160, 192].into_iter().enumerate() {
        let b1 = conv_bn(n, x, 192, 1, 1, 1, Same);
        let b7 = conv_bn(n, x, f, 1, 1, 1, Same);
        let b7 = conv_bn(n, b7, f, 1, 7, 1, Same);
        let b7 = conv_bn(n, b7, 192, 7, 1, 1, Same);
        let bd = conv_bn(n, x, f, 1, 1, 1, Same);
        let bd = conv_bn(n, bd, f, 7, 1, 1, Same);
        let bd = conv_bn(n, bd, f, 1, 7, 1, Same);
        let bd = conv_bn(n, bd, f, 7, 1, 1, Same);
        let bd = conv_bn(n, bd, 192, 1, 7, 1, Same);
        let bp = avg_pool_same(n, x);
        let bp = conv_bn(n, bp, 192, 1, 1, 1, Same);
        let name = format!("mixed{}", 4 + i);
        x = n.named(name.clone(), Op::Concat, &[b1, b7, bd, bp]);
        n.end_block(name);
    }

    let b3 = conv_bn(n, x, 192, 1, 1, 1, Same);
    let b3 = conv_bn(n, b3, 320, 3, 3, 2, Valid);
    let b7 = conv_bn(n, x, 192, 1, 1, 1, Same);
    let b7 = conv_bn(n, b7, 192, 1, 7, 1, Same);
    let b7 = conv_bn(n, b7, 192, 7, 1, 1, Same);
    let b7 = conv_bn(n, b7, 192, 3, 3, 2, Valid);
    let bp = n.auto(max_pool(3, 2, Valid), &[x]);
    x = n.named("mixed8", Op::Concat, &[b3, b7, bp]);
    n.end_block("mixed8");

    for i in 0..2 {
        let b1 = conv_bn(n, x, 320, 1, 1, 1, Same);
        let b3 = conv_bn(n, x, 384, 1, 1, 1, Same);
        let b3a = conv_bn(n, b3, 384, 1, 3, 1, Same);
        let b3b = conv_bn(n, b3, 384, 3, 1, 1, Same);
        let b3 = n.named(format!("mixed9_{i}"), Op::Concat, &[b3a, b3b]);
        let bd = conv_bn(n, x, 448, 1, 1, 1, Same);
        let bd = conv_bn(n, bd, 384, 3, 3, 1, Same);
        let bda = conv_bn(n, bd, 384, 1, 3, 1, Same);
        let bdb = conv_bn(n, bd, 384, 3, 1, 1, Same);
        let bd = n.auto(Op::Concat, &[bda, bdb]);
        let bp = avg_pool_same(n, x);
        let bp = conv_bn(n, bp, 192, 1, 1, 1, Same);
        let name = format!("mixed{}", 9 + i);
        x = n.named(name.clone(), Op::Concat, &[b1, b3, bd, bp]);
        n.end_block(name);
    }
    net.finish(Backbone::InceptionV3)
}

fn sep(filters: usize) -> Op {
    Op::SeparableConv2d {
        filters,
        kernel: [3, 3],
        strides: [1, 1],
        padding: Padding::Same,
        use_bias: false,
        activation: Activation::Linear,
    }
}

/// Strided 1x1 projection used on the residual path.
fn residual(n: &mut Net, x: NodeId, filters: usize) -> NodeId {
    let c = n.auto(conv(filters, [1, 1], 2, Padding::Same, false, Activation::Linear), &[x]);
    n.auto(Op::batch_norm(), &[c])
}

fn build_xception() -> Result<TransferGraph> {
    let mut net = Net::new();
    let n = &mut net;
    let mut x = n.g.input();
    for (c, filters, stride) in [(1, 32, 2), (2, 64, 1)] {
        let op = conv(filters, [3, 3], stride, Padding::Valid, false, Activation::Linear);
        x = n.named(format!("block1_conv{c}"), op, &[x]);
        x = n.named(format!("block1_conv{c}_bn"), Op::batch_norm(), &[x]);
        x = n.named(format!("block1_conv{c}_act"), relu(), &[x]);
    }
    n.end_block("block1");

    // entry flow: the first block has no leading activation
    for (b, filters) in [(2, 128), (3, 256), (4, 728)] {
        let r = residual(n, x, filters);
        if b > 2 {
            x = n.named(format!("block{b}_sepconv1_act"), relu(), &[x]);
        }
        x = n.named(format!("block{b}_sepconv1"), sep(filters), &[x]);
        x = n.named(format!("block{b}_sepconv1_bn"), Op::batch_norm(), &[x]);
        x = n.named(format!("block{b}_sepconv2_act"), relu(), &[x]);
        x = n.named(format!("block{b}_sepconv2"), sep(filters), &[x]);
        x = n.named(format!("block{b}_sepconv2_bn"), Op::batch_norm(), &[x]);
        x = n.named(format!("block{b}_pool"), max_pool(3, 2, Padding::Same), &[x]);
        x = n.auto(Op::Add, &[x, r]);
        n.end_block(format!("block{b}"));
    }

    for b in 5..=12 {
        let r = x;
        for s in 1..=3 {
            x = n.named(format!("block{b}_sepconv{s}_act"), relu(), &[x]);
            x = n.named(format!("block{b}_sepconv{s}"), sep(728), &[x]);
            x = n.named(format!("block{b}_sepconv{s}_bn"), Op::batch_norm(), &[x]);
        }
        x = n.auto(Op::Add, &[x, r]);
        n.end_block(format!("block{b}"));
    }

    let r = residual(n, x, 1024);
    for (s, filters) in [(1, 728), (2, 1024)] {
        x = n.named(format!("block13_sepconv{s}_act"), relu(), &[x]);
        x = n.named(format!("block13_sepconv{s}"), sep(filters), &[x]);
        x = n.named(format!("block13_sepconv{s}_bn"), Op::batch_norm(), &[x]);
    }
    x = n.named("block13_pool", max_pool(3, 2, Padding::Same), &[x]);
    x = n.auto(Op::Add, &[x, r]);
    n.end_block("block13");

    for (s, filters) in [(1, 1536), (2, 2048)] {
        x = n.named(format!("block14_sepconv{s}"), sep(filters), &[x]);
        x = n.named(format!("block14_sepconv{s}_bn"), Op::batch_norm(), &[x]);
        x = n.named(format!("block14_sepconv{s}_act"), relu(), &[x]);
    }
    n.end_block("block14");
    net.finish(Backbone::Xception)
}

/// Backbone (no original classifier) followed by global average pooling,
/// a 256-unit ReLU layer, dropout 0.5 and a 2-way softmax.
pub fn build_transfer_model(backbone: Backbone) -> Result<TransferGraph> {
    match backbone {
        Backbone::Vgg19 => build_vgg19(),
        Backbone::InceptionV3 => build_inception_v3(),
        Backbone::Xception => build_xception(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    /// Per graph node.
    pub trainable: Vec<bool>,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub regime: Regime,
    pub backbone: Backbone,
    pub phases: Vec<Phase>,
}

impl RegimeSpec {
    /// Phase masks and configs for `regime`. The incremental regime uses
    /// fixed phase budgets and a tenfold smaller learning rate in phase 2.
    pub fn new(regime: Regime, spec: &BackboneSpec, base: &TrainConfig) -> Self {
        let len = spec.head.end;
        let mask = |ranges: &[Range<usize>]| -> Vec<bool> {
            (0..len).map(|i| ranges.iter().any(|r| r.contains(&i))).collect()
        };
        let head = mask(&[spec.head.clone()]);
        let phases = match regime {
            Regime::Frozen => vec![Phase {
                trainable: head,
                config: base.clone(),
            }],
            Regime::Incremental => {
                let mut ranges: Vec<Range<usize>> =
                    spec.last_two_blocks().iter().map(|b| b.nodes.clone()).collect();
                ranges.push(spec.head.clone());
                let lr = base.optimizer.learning_rate() / INCREMENTAL_LR_DIVISOR;
                vec![
                    Phase {
                        trainable: head,
                        config: TrainConfig {
                            max_epochs: INCREMENTAL_PHASE_EPOCHS[0],
                            ..base.clone()
                        },
                    },
                    Phase {
                        trainable: mask(&ranges),
                        config: TrainConfig {
                            max_epochs: INCREMENTAL_PHASE_EPOCHS[1],
                            optimizer: base.optimizer.with_learning_rate(lr),
                            ..base.clone()
                        },
                    },
                ]
            }
            Regime::Full => vec![Phase {
                trainable: vec![true; len],
                config: base.clone(),
            }],
        };
        Self {
            regime,
            backbone: spec.backbone,
            phases,
        }
    }

    /// Caps every phase at `max_epochs`, for quick runs.
    pub fn cap_epochs(mut self, max_epochs: usize) -> Self {
        for p in &mut self.phases {
            p.config.max_epochs = p.config.max_epochs.min(max_epochs);
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlag {
    pub name: String,
    pub trainable: bool,
    pub weights: usize,
}

/// Counts are of weights only; batch-norm moving statistics are buffers
/// and belong to neither side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskReport {
    pub regime: Regime,
    pub phase: usize,
    pub layers: Vec<LayerFlag>,
    pub trainable_params: usize,
    pub frozen_params: usize,
}

impl MaskReport {
    pub fn total_params(&self) -> usize {
        self.trainable_params + self.frozen_params
    }
}

/// Sets the trainable flags of `model` for `phase` of `spec`.
pub fn apply_regime(model: &mut Model, spec: &RegimeSpec, phase: usize) -> Result<MaskReport> {
    let p = spec.phases.get(phase).ok_or_else(|| {
        CoreError::Config(format!(
            "{} regime has {} phase(s), asked for phase {phase}",
            spec.regime,
            spec.phases.len()
        ))
    })?;
    if p.trainable.len() != model.graph().len() {
        return Err(CoreError::Config(format!(
            "{} mask covers {} layers but the model has {}",
            spec.backbone,
            p.trainable.len(),
            model.graph().len()
        )));
    }
    let mut report = MaskReport {
        regime: spec.regime,
        phase,
        layers: Vec::new(),
        trainable_params: 0,
        frozen_params: 0,
    };
    for (i, &t) in p.trainable.iter().enumerate() {
        model.set_trainable(i, t);
        let weights = model.weight_count(i);
        if t {
            report.trainable_params += weights;
        } else {
            report.frozen_params += weights;
        }
        report.layers.push(LayerFlag {
            name: model.graph().nodes[i].name.clone(),
            trainable: t,
            weights,
        });
    }
    Ok(report)
}

pub fn weights_dir() -> PathBuf {
    std::env::var_os(WEIGHTS_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("weights"))
}

pub fn snapshot_path(weights_dir: &Path, backbone: Backbone) -> PathBuf {
    weights_dir.join(backbone.name())
}

/// Copies a converted ImageNet snapshot into the backbone layers of
/// `model`. Every weighted backbone layer must be covered.
pub fn load_pretrained(model: &mut Model, spec: &BackboneSpec, weights_dir: &Path) -> Result<usize> {
    let dir = snapshot_path(weights_dir, spec.backbone);
    if !dir.join(io::MODEL_FILE).is_file() {
        return Err(CoreError::MissingSnapshot {
            backbone: spec.backbone.name().into(),
            path: dir,
        });
    }
    let loaded = io::load_into(model, &dir)?;
    let expected = spec
        .backbone_nodes()
        .filter(|&i| model.graph().nodes[i].op.has_weights())
        .count();
    if loaded != expected {
        return Err(CoreError::Data(format!(
            "{} snapshot in {} covers {loaded} of {expected} backbone layers",
            spec.backbone,
            dir.display()
        )));
    }
    info!("loaded {} pretrained layers from {}", loaded, dir.display());
    Ok(loaded)
}

#[derive(Clone, Debug)]
pub struct RegimeRun {
    pub masks: Vec<MaskReport>,
    pub histories: Vec<TrainingHistory>,
    pub report: EvaluationReport,
}

/// Runs every phase of `spec` on `model` (already holding pretrained
/// weights) and evaluates the result on `test`.
#[allow(clippy::too_many_arguments)]
pub fn run_regime(
    model: &mut Model,
    spec: &RegimeSpec,
    train: &dyn ImageSource,
    validation: Option<&dyn ImageSource>,
    test: &dyn ImageSource,
    profile: &PreprocessProfile,
    seed: u64,
) -> Result<RegimeRun> {
    let mut masks = Vec::new();
    let mut histories = Vec::new();
    for (i, phase) in spec.phases.iter().enumerate() {
        let mask = apply_regime(model, spec, i)?;
        info!(
            "{} {} phase {}: {} trainable, {} frozen weights",
            spec.backbone,
            spec.regime,
            i + 1,
            mask.trainable_params,
            mask.frozen_params
        );
        masks.push(mask);
        let seed = seed.wrapping_add(i as u64);
        histories.push(train_model(model, train, validation, profile, &phase.config, seed)?);
    }
    let batch = spec.phases.last().map_or(64, |p| p.config.batch_size);
    let report = evaluate(model, test, &profile.without_augment(), batch)?;
    Ok(RegimeRun {
        masks,
        histories,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse() {
        assert_eq!("Inception-V3".parse::<Backbone>().unwrap(), Backbone::InceptionV3);
        assert_eq!("full".parse::<Regime>().unwrap(), Regime::Full);
        assert!("resnet50".parse::<Backbone>().is_err());
    }

    #[test]
    fn vgg_blocks_are_named_and_contiguous() {
        let t = build_transfer_model(Backbone::Vgg19).unwrap();
        let names: Vec<_> = t.spec.blocks.iter().map(|b| b.name.as_str()).collect();
        assert_eq!(names, ["block1", "block2", "block3", "block4", "block5"]);
        let last: Vec<_> = t.spec.last_two_blocks().iter().map(|b| b.name.as_str()).collect();
        assert_eq!(last, ["block4", "block5"]);
        t.spec.check_coverage(t.graph.len()).unwrap();
    }

    #[test]
    fn phase_index_out_of_range_is_an_error() {
        let t = build_transfer_model(Backbone::Vgg19).unwrap();
        let spec = RegimeSpec::new(Regime::Frozen, &t.spec, &TrainConfig::sgd());
        let mut m = Model::from_params(t.graph.clone(), zero_params(&t.graph)).unwrap();
        assert!(apply_regime(&mut m, &spec, 1).is_err());
    }

    fn zero_params(g: &LayerGraph) -> Vec<Vec<plasmodium_nn::Tensor>> {
        g.param_specs()
            .unwrap()
            .iter()
            .map(|s| s.iter().map(|p| plasmodium_nn::Tensor::zeros(&p.shape)).collect())
            .collect()
    }
}
