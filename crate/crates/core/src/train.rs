//! Minibatch training with plateau callbacks, shared by the hand-built
//! CNNs and the transfer regimes.

use std::fmt::Write as _;

use log::{info, warn};
use plasmodium_nn::{loss, Model, Optimizer, OptimizerConfig, OutputGrad, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, LabeledImage};
use crate::error::{CoreError, Result};
use crate::metrics::{self, EvaluationReport};
use crate::preprocess::{augment, standardize, PreprocessProfile};

pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_MAX_EPOCHS: usize = 50;

/// Samples that can be turned into standardized model inputs.
pub trait ImageSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, index: usize) -> Label;

    /// Standardized pixels, `[h, w, 3]`, without augmentation.
    fn standardized(&self, index: usize, profile: &PreprocessProfile) -> Result<Tensor>;

    fn labels(&self) -> Vec<Label> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }
}

/// Decoded images, standardized on every access.
#[derive(Clone, Debug, Default)]
pub struct ImageSet<'a> {
    pub images: Vec<&'a LabeledImage>,
}

impl<'a> ImageSet<'a> {
    pub fn new(images: Vec<&'a LabeledImage>) -> Self {
        Self { images }
    }

    pub fn select(corpus: &'a [LabeledImage], indices: &[usize]) -> Self {
        Self::new(indices.iter().map(|&i| &corpus[i]).collect())
    }

    /// Standardizes everything once.
    pub fn cached(&self, profile: &PreprocessProfile) -> Result<TensorSet> {
        TensorSet::from_source(self, profile)
    }
}

impl ImageSource for ImageSet<'_> {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn label(&self, index: usize) -> Label {
        self.images[index].label
    }

    fn standardized(&self, index: usize, profile: &PreprocessProfile) -> Result<Tensor> {
        standardize(&self.images[index].pixels, &profile.without_augment())
    }
}

/// Already standardized samples of a single shape.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorSet {
    pub sample_shape: [usize; 3],
    pub data: Vec<f32>,
    pub labels: Vec<Label>,
}

impl TensorSet {
    pub fn new(sample_shape: [usize; 3]) -> Self {
        Self {
            sample_shape,
            data: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_source(source: &dyn ImageSource, profile: &PreprocessProfile) -> Result<Self> {
        let mut set = Self::new(profile.sample_shape());
        let samples: Vec<Tensor> = (0..source.len())
            .into_par_iter()
            .map(|i| source.standardized(i, profile))
            .collect::<Result<_>>()?;
        for (i, s) in samples.iter().enumerate() {
            set.push(s.data(), source.label(i))?;
        }
        Ok(set)
    }

    pub fn push(&mut self, sample: &[f32], label: Label) -> Result<()> {
        if sample.len() != self.sample_shape.iter().product::<usize>() {
            return Err(CoreError::Data(format!(
                "sample of {} values does not fit shape {:?}",
                sample.len(),
                self.sample_shape
            )));
        }
        self.data.extend_from_slice(sample);
        self.labels.push(label);
        Ok(())
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, index: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[index * n..][..n]
    }

    pub fn subset(&self, indices: &[usize]) -> TensorSet {
        let mut out = TensorSet::new(self.sample_shape);
        for &i in indices {
            out.data.extend_from_slice(self.sample(i));
            out.labels.push(self.labels[i]);
        }
        out
    }
}

impl ImageSource for TensorSet {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn label(&self, index: usize) -> Label {
        self.labels[index]
    }

    fn standardized(&self, index: usize, profile: &PreprocessProfile) -> Result<Tensor> {
        let (h, w) = profile.target_size;
        if [h, w, 3] != self.sample_shape {
            return Err(CoreError::Config(format!(
                "cached samples are {:?}, profile wants {h}x{w}",
                self.sample_shape
            )));
        }
        Ok(Tensor::from_vec(&self.sample_shape, self.sample(index).to_vec())?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValLoss,
    ValAccuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CallbackConfig {
    pub early_stop_patience: usize,
    pub checkpoint_on: Monitor,
    pub lr_reduce_factor: f32,
    pub lr_reduce_patience: usize,
}

impl Default for CallbackConfig {
    fn default() -> Self {
        Self {
            early_stop_patience: 5,
            checkpoint_on: Monitor::ValLoss,
            lr_reduce_factor: 0.5,
            lr_reduce_patience: 3,
        }
    }
}

impl CallbackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.early_stop_patience == 0 || self.lr_reduce_patience == 0 {
            return Err(CoreError::Config("callback patiences must be at least 1".into()));
        }
        if !(self.lr_reduce_factor > 0.0 && self.lr_reduce_factor < 1.0) {
            return Err(CoreError::Config(format!(
                "lr_reduce_factor must lie in (0, 1), got {}",
                self.lr_reduce_factor
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// `None` trains for exactly `max_epochs` with a fixed learning rate.
    pub callbacks: Option<CallbackConfig>,
    /// Stop once an epoch's training accuracy reaches this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_train_accuracy: Option<f32>,
}

impl TrainConfig {
    pub fn rmsprop() -> Self {
        Self::with_optimizer(OptimizerConfig::rmsprop(1e-3))
    }

    pub fn sgd() -> Self {
        Self::with_optimizer(OptimizerConfig::sgd(1e-2))
    }

    pub fn with_optimizer(optimizer: OptimizerConfig) -> Self {
        Self {
            optimizer,
            batch_size: DEFAULT_BATCH_SIZE,
            max_epochs: DEFAULT_MAX_EPOCHS,
            callbacks: Some(CallbackConfig::default()),
            target_train_accuracy: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.optimizer.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(CoreError::Config(format!("learning rate must be positive, got {lr}")));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be at least 1".into()));
        }
        if let Some(cb) = &self.callbacks {
            cb.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f32,
    pub train_acc: f32,
    pub val_loss: Option<f32>,
    pub val_acc: Option<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights the model holds at the end.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,train_acc,val_loss,val_acc\n");
        let opt = |v: Option<f32>| v.map(|v| v.to_string()).unwrap_or_default();
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch,
                e.lr,
                e.train_loss,
                e.train_acc,
                opt(e.val_loss),
                opt(e.val_acc)
            );
        }
        out
    }

    /// Concatenates phases, renumbering epochs consecutively.
    pub fn concat(phases: &[TrainingHistory]) -> TrainingHistory {
        let mut out = TrainingHistory::default();
        for p in phases {
            let offset = out.epochs.len();
            out.epochs.extend(p.epochs.iter().map(|e| EpochRecord {
                epoch: e.epoch + offset,
                ..e.clone()
            }));
            out.best_epoch = p.best_epoch.map(|b| b + offset);
            out.stopped_early = p.stopped_early;
        }
        out
    }
}

/// Builds the `[n, h, w, 3]` batch for `indices`, augmenting when the
/// profile asks for it. Each sample draws from its own random stream.
pub fn assemble_batch(
    source: &dyn ImageSource,
    indices: &[usize],
    profile: &PreprocessProfile,
    epoch: usize,
) -> Result<Tensor> {
    let samples: Vec<Tensor> = indices
        .par_iter()
        .map(|&i| {
            let x = source.standardized(i, profile)?;
            // ReLU would quietly map NaN to 0
            if !x.is_finite() {
                return Err(CoreError::Data(format!("sample {i} has non-finite pixel values")));
            }
            match &profile.augment {
                Some(cfg) => augment(&x, cfg, &mut cfg.sample_rng(epoch, i)),
                None => Ok(x),
            }
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[f32]> = samples.iter().map(|t| t.data()).collect();
    Ok(Tensor::stack(&refs, &profile.sample_shape())?)
}

/// Parasitized-class probability for every sample, in eval mode.
pub fn predict_source(
    model: &Model,
    source: &dyn ImageSource,
    profile: &PreprocessProfile,
    batch_size: usize,
) -> Result<Vec<[f32; 2]>> {
    let eval = profile.without_augment();
    let idx: Vec<usize> = (0..source.len()).collect();
    let mut out = Vec::with_capacity(source.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = assemble_batch(source, chunk, &eval, 0)?;
        let p = model.predict(&x)?;
        out.extend(p.data().chunks(2).map(|r| [r[0], r[1]]));
    }
    Ok(out)
}

/// Mean cross-entropy and accuracy over `source` in eval mode.
pub fn loss_and_accuracy(
    model: &Model,
    source: &dyn ImageSource,
    profile: &PreprocessProfile,
    batch_size: usize,
) -> Result<(f32, f32)> {
    let probs = predict_source(model, source, profile, batch_size)?;
    let labels: Vec<usize> = source.labels().iter().map(|l| l.index()).collect();
    let flat: Vec<f32> = probs.iter().flatten().copied().collect();
    let t = Tensor::from_vec(&[probs.len(), 2], flat)?;
    Ok((loss::cross_entropy(&t, &labels)?, loss::accuracy(&t, &labels)?))
}

/// Confusion matrix and full metric report on `source`; argmax decides
/// the label, the parasitized probability feeds the ROC.
pub fn evaluate(
    model: &Model,
    source: &dyn ImageSource,
    profile: &PreprocessProfile,
    batch_size: usize,
) -> Result<EvaluationReport> {
    let probs = predict_source(model, source, profile, batch_size)?;
    let truth: Vec<usize> = source.labels().iter().map(|l| l.index()).collect();
    let pred: Vec<usize> = probs.iter().map(|p| usize::from(p[1] > p[0])).collect();
    let scores: Vec<f64> = probs.iter().map(|p| p[1] as f64).collect();
    let cm = metrics::confusion(&truth, &pred)?;
    let has_both = truth.iter().any(|&t| t == 0) && truth.iter().any(|&t| t == 1);
    metrics::report(&cm, has_both.then_some((&truth[..], &scores[..])))
}

struct Plateau {
    best: f32,
    wait: usize,
}

impl Plateau {
    fn new() -> Self {
        Self {
            best: f32::INFINITY,
            wait: 0,
        }
    }

    /// Lower is better. Returns whether `value` improved on the best.
    fn update(&mut self, value: f32) -> bool {
        if value < self.best {
            self.best = value;
            self.wait = 0;
            true
        } else {
            self.wait += 1;
            false
        }
    }
}

/// Trains `model` in place on `train`, monitoring `validation` when given
/// (otherwise the training loss stands in for the monitored metric).
pub fn train_model(
    model: &mut Model,
    train: &dyn ImageSource,
    validation: Option<&dyn ImageSource>,
    profile: &PreprocessProfile,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainingHistory> {
    config.validate()?;
    profile.validate()?;
    if train.is_empty() {
        return Err(CoreError::Data("the training set is empty".into()));
    }
    let (h, w) = profile.target_size;
    if model.input_shape() != [h, w, 3] {
        return Err(CoreError::Config(format!(
            "profile size {h}x{w} does not match model input {:?}",
            model.input_shape()
        )));
    }
    let validation = validation.filter(|v| !v.is_empty());
    let mut opt = Optimizer::new(config.optimizer);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainingHistory::default();
    let mut stop_plateau = Plateau::new();
    let mut lr_plateau = Plateau::new();
    let mut best: Option<(plasmodium_nn::Snapshot, usize)> = None;
    let labels: Vec<usize> = train.labels().iter().map(|l| l.index()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = opt.learning_rate();
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = assemble_batch(train, chunk, profile, epoch)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let tape = model.forward_train(&x, &mut dropout_rng)?;
            let (batch_loss, grad) = loss::softmax_cross_entropy(tape.output(), &y)?;
            if !batch_loss.is_finite() {
                return Err(CoreError::Divergence {
                    epoch,
                    batch: b + 1,
                    loss: batch_loss,
                });
            }
            let acc = loss::accuracy(tape.output(), &y)?;
            loss_sum += batch_loss as f64 * chunk.len() as f64;
            hits += (acc * chunk.len() as f32).round() as usize;
            let grads = model.backward(&tape, OutputGrad::PreActivation(grad))?;
            drop(tape);
            opt.step(model, &grads);
        }
        let train_loss = (loss_sum / train.len() as f64) as f32;
        let train_acc = hits as f32 / train.len() as f32;
        let (val_loss, val_acc) = match validation {
            Some(v) => {
                let (l, a) = loss_and_accuracy(model, v, profile, config.batch_size)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        info!(
            "epoch {epoch}: lr {lr:.3e} loss {train_loss:.4} acc {train_acc:.4}{}",
            match (val_loss, val_acc) {
                (Some(l), Some(a)) => format!(" val_loss {l:.4} val_acc {a:.4}"),
                _ => String::new(),
            }
        );
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        });
        if let Some(cb) = &config.callbacks {
            let monitored = match (cb.checkpoint_on, val_loss, val_acc) {
                (Monitor::ValLoss, Some(l), _) => l,
                (Monitor::ValAccuracy, _, Some(a)) => -a,
                _ => train_loss,
            };
            if !monitored.is_finite() {
                return Err(CoreError::Divergence {
                    epoch,
                    batch: 0,
                    loss: monitored,
                });
            }
            if stop_plateau.update(monitored) {
                best = Some((model.snapshot(), epoch));
            }
            if !lr_plateau.update(monitored) && lr_plateau.wait >= cb.lr_reduce_patience {
                opt.set_learning_rate(lr * cb.lr_reduce_factor);
                lr_plateau.wait = 0;
                info!("reducing learning rate to {:.3e}", opt.learning_rate());
            }
            if stop_plateau.wait >= cb.early_stop_patience {
                history.stopped_early = true;
                info!("early stop after epoch {epoch}");
                break;
            }
        }
        if config.target_train_accuracy.is_some_and(|t| train_acc >= t) {
            break;
        }
    }
    match best {
        Some((snapshot, epoch)) => {
            model.restore(&snapshot);
            history.best_epoch = Some(epoch);
        }
        None => history.best_epoch = history.epochs.last().map(|e| e.epoch),
    }
    if history.is_empty() {
        warn!("max_epochs is 0; the model was not trained");
    }
    Ok(history)
}
