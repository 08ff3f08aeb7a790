//! First-order optimizers. Only weights of trainable layers receive
//! updates; batch-norm moving statistics are never touched here.

use serde::{Deserialize, Serialize};

use crate::exec::Gradients;
use crate::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    /// `v = momentum * v - lr * g; w += v`.
    Sgd { learning_rate: f32, momentum: f32 },
    /// `s = rho * s + (1 - rho) * g^2; w -= lr * g / (sqrt(s) + epsilon)`.
    RmsProp {
        learning_rate: f32,
        rho: f32,
        epsilon: f32,
    },
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f32) -> Self {
        Self::Sgd {
            learning_rate,
            momentum: 0.9,
        }
    }

    pub fn rmsprop(learning_rate: f32) -> Self {
        Self::RmsProp {
            learning_rate,
            rho: 0.9,
            epsilon: 1e-7,
        }
    }

    pub fn learning_rate(&self) -> f32 {
        match *self {
            Self::Sgd { learning_rate, .. } | Self::RmsProp { learning_rate, .. } => learning_rate,
        }
    }

    pub fn with_learning_rate(mut self, lr: f32) -> Self {
        match &mut self {
            Self::Sgd { learning_rate, .. } | Self::RmsProp { learning_rate, .. } => {
                *learning_rate = lr
            }
        }
        self
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    /// Per node, per parameter slot state, allocated on first use.
    slots: Vec<Vec<Vec<f32>>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            slots: Vec::new(),
        }
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    pub fn learning_rate(&self) -> f32 {
        self.config.learning_rate()
    }

    pub fn set_learning_rate(&mut self, lr: f32) {
        self.config = self.config.with_learning_rate(lr);
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) {
        if self.slots.len() < grads.nodes() {
            self.slots.resize(grads.nodes(), Vec::new());
        }
        let config = self.config;
        for (node, params) in model.params_all_mut().iter_mut().enumerate() {
            let slots = &mut self.slots[node];
            if slots.len() < params.len() {
                slots.resize(params.len(), Vec::new());
            }
            for (p, (param, slot)) in params.iter_mut().zip(slots.iter_mut()).enumerate() {
                let Some(g) = grads.get(node, p) else { continue };
                if slot.len() != g.len() {
                    *slot = vec![0.0; g.len()];
                }
                let w = param.data_mut();
                match config {
                    OptimizerConfig::Sgd {
                        learning_rate,
                        momentum,
                    } => {
                        for ((w, v), g) in w.iter_mut().zip(slot.iter_mut()).zip(g) {
                            *v = momentum * *v - learning_rate * g;
                            *w += *v;
                        }
                    }
                    OptimizerConfig::RmsProp {
                        learning_rate,
                        rho,
                        epsilon,
                    } => {
                        for ((w, s), g) in w.iter_mut().zip(slot.iter_mut()).zip(g) {
                            *s = rho * *s + (1.0 - rho) * g * g;
                            *w -= learning_rate * g / (s.sqrt() + epsilon);
                        }
                    }
                }
            }
        }
    }
}
