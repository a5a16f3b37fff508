use serde::{Deserialize, Serialize};

use super::schedule::Schedule;
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Update rule. Every kind consumes the mini-batch MSE gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Full-batch gradient descent.
    Gd,
    Sgd,
    Momentum { beta: f64 },
    Adagrad,
    Adadelta { rho: f64 },
    Rmsprop { alpha: f64 },
    Adam { beta1: f64, beta2: f64 },
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Gd => "gd",
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum { .. } => "momentum",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Adadelta { .. } => "adadelta",
            OptimizerKind::Rmsprop { .. } => "rmsprop",
            OptimizerKind::Adam { .. } => "adam",
        }
    }

    pub fn momentum() -> Self {
        OptimizerKind::Momentum { beta: 0.9 }
    }

    pub fn adadelta() -> Self {
        OptimizerKind::Adadelta { rho: 0.9 }
    }

    pub fn rmsprop() -> Self {
        OptimizerKind::Rmsprop { alpha: 0.99 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
        }
    }

    fn decay_constants(&self) -> Vec<(&'static str, f64)> {
        match *self {
            OptimizerKind::Momentum { beta } => vec![("beta", beta)],
            OptimizerKind::Adadelta { rho } => vec![("rho", rho)],
            OptimizerKind::Rmsprop { alpha } => vec![("alpha", alpha)],
            OptimizerKind::Adam { beta1, beta2 } => vec![("beta1", beta1), ("beta2", beta2)],
            _ => Vec::new(),
        }
    }
}

/// How mini-batches are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// A fresh permutation per epoch, consumed in consecutive chunks.
    #[default]
    Permutation,
    /// Independent uniform draws every step.
    WithReplacement,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    /// Mini-batch size; `None` means the full training set.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub sampler_seed: u64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub schedule: Schedule,
}

impl OptimizerSpec {
    pub fn new(kind: OptimizerKind, batch_size: Option<usize>, schedule: Schedule) -> Self {
        Self {
            kind,
            batch_size,
            sampling: Sampling::Permutation,
            sampler_seed: 0,
            epsilon: DEFAULT_EPSILON,
            schedule,
        }
    }

    pub fn gd(lr: f64) -> Self {
        Self::new(OptimizerKind::Gd, None, Schedule::Constant { lr })
    }

    pub fn sgd(batch_size: usize, lr: f64, sampler_seed: u64) -> Self {
        Self::new(OptimizerKind::Sgd, Some(batch_size), Schedule::Constant { lr }).with_sampler_seed(sampler_seed)
    }

    pub fn with_sampler_seed(mut self, seed: u64) -> Self {
        self.sampler_seed = seed;
        self
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    /// Effective batch size on `n` training rows.
    pub fn effective_batch(&self, n: usize) -> usize {
        match (self.kind, self.batch_size) {
            (OptimizerKind::Gd, _) | (_, None) => n,
            (_, Some(b)) => b.min(n),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if let Some(b) = self.batch_size {
            if b == 0 || b > n {
                return Err(Error::config("optimizer.batch_size", format!("must lie in 1..={n}, got {b}")));
            }
            if self.kind == OptimizerKind::Gd && b != n {
                return Err(Error::config("optimizer.batch_size", "gd always uses the full training set"));
            }
        }
        for (name, value) in self.kind.decay_constants() {
            if !(value > 0.0 && value < 1.0) && !(name == "beta" && value == 0.0) {
                return Err(Error::config(format!("optimizer.{name}"), format!("must lie in (0, 1), got {value}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("optimizer.epsilon", "must be > 0"));
        }
        self.schedule.validate()
    }
}

/// Per-parameter buffers of an adaptive or momentum method.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    epsilon: f64,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, epsilon: f64, params: usize) -> Self {
        let (first, second) = match kind {
            OptimizerKind::Gd | OptimizerKind::Sgd => (0, 0),
            OptimizerKind::Momentum { .. } | OptimizerKind::Adagrad | OptimizerKind::Rmsprop { .. } => (params, 0),
            OptimizerKind::Adadelta { .. } | OptimizerKind::Adam { .. } => (params, params),
        };
        Self {
            kind,
            epsilon,
            step: 0,
            first: vec![0.0; first],
            second: vec![0.0; second],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Momentum velocity, Adagrad/RMSprop square accumulator, Adadelta
    /// gradient accumulator or Adam first moment.
    pub fn first_buffer(&self) -> &[f64] {
        &self.first
    }

    /// Adadelta update accumulator or Adam second moment.
    pub fn second_buffer(&self) -> &[f64] {
        &self.second
    }

    /// Applies one update to `w` in place.
    pub fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64) {
        assert_eq!(w.len(), g.len(), "gradient length differs from parameter count");
        self.step += 1;
        let eps = self.epsilon;
        match self.kind {
            OptimizerKind::Gd | OptimizerKind::Sgd => {
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= lr * gi;
                }
            }
            OptimizerKind::Momentum { beta } => {
                for ((wi, gi), vi) in w.iter_mut().zip(g).zip(&mut self.first) {
                    *vi = beta * *vi + gi;
                    *wi -= lr * *vi;
                }
            }
            OptimizerKind::Adagrad => {
                for ((wi, gi), acc) in w.iter_mut().zip(g).zip(&mut self.first) {
                    *acc += gi * gi;
                    *wi -= lr * gi / (acc.sqrt() + eps);
                }
            }
            OptimizerKind::Rmsprop { alpha } => {
                for ((wi, gi), sq) in w.iter_mut().zip(g).zip(&mut self.first) {
                    *sq = alpha * *sq + (1.0 - alpha) * gi * gi;
                    *wi -= lr * gi / (sq.sqrt() + eps);
                }
            }
            OptimizerKind::Adadelta { rho } => {
                for (((wi, gi), acc_g), acc_d) in w.iter_mut().zip(g).zip(&mut self.first).zip(&mut self.second) {
                    *acc_g = rho * *acc_g + (1.0 - rho) * gi * gi;
                    let delta = ((*acc_d + eps).sqrt() / (*acc_g + eps).sqrt()) * gi;
                    *acc_d = rho * *acc_d + (1.0 - rho) * delta * delta;
                    *wi -= lr * delta;
                }
            }
            OptimizerKind::Adam { beta1, beta2 } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((wi, gi), m), v) in w.iter_mut().zip(g).zip(&mut self.first).zip(&mut self.second) {
                    *m = beta1 * *m + (1.0 - beta1) * gi;
                    *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                    *wi -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}
