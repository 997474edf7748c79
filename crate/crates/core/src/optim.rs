//! Adaptive-moment gradient descent and its configuration.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    /// Early stop when the loss improved by less than `tolerance` over the
    /// last `patience` iterations.
    pub patience: usize,
    pub tolerance: f64,
    /// Minibatch size. `None` means the full dataset when it holds at most
    /// `FULL_BATCH_LIMIT` clips and batches of 256 otherwise.
    pub batch_size: Option<usize>,
}

pub const FULL_BATCH_LIMIT: usize = 4096;

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_iters: 2000,
            patience: 50,
            tolerance: 1e-6,
            batch_size: None,
        }
    }
}

impl OptimizerConfig {
    pub fn effective_batch(&self, n: usize) -> usize {
        match self.batch_size {
            Some(b) => b.clamp(1, n.max(1)),
            None if n <= FULL_BATCH_LIMIT => n,
            None => 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig, dim: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// Returns the update to subtract from the parameters.
    pub fn step(&mut self, grad: &[f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let OptimizerConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
            ..
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        self.m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(grad)
            .map(|((m, v), &g)| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                lr * (*m / c1) / ((*v / c2).sqrt() + eps)
            })
            .collect()
    }
}

/// Tracks the loss history for the patience-based stopping rule.
#[derive(Debug, Clone)]
pub(crate) struct EarlyStop {
    patience: usize,
    tolerance: f64,
    history: Vec<f64>,
}

impl EarlyStop {
    pub(crate) fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            patience: cfg.patience,
            tolerance: cfg.tolerance,
            history: Vec::new(),
        }
    }

    /// Records `loss`; returns true when training should stop.
    pub(crate) fn record(&mut self, loss: f64) -> bool {
        self.history.push(loss);
        let n = self.history.len();
        self.patience > 0
            && n > self.patience
            && self.history[n - 1 - self.patience] - loss < self.tolerance
    }
}
