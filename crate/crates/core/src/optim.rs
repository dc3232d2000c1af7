//! First-order optimizers shared by the trainers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// SGD with heavy-ball momentum.
    #[default]
    Sgd,
    Adam,
}

/// Constant step size up to `decay_after`, then `lr sqrt(decay_after / k)`.
pub fn step_size(lr: f64, decay_after: usize, k: usize) -> f64 {
    let k0 = decay_after.max(1);
    if k < k0 {
        lr
    } else {
        lr * (k0 as f64 / k as f64).sqrt()
    }
}

/// Rescales `grad` to norm at most `c`.
pub fn clip(grad: &mut [f64], c: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > c {
        grad.iter_mut().for_each(|g| *g *= c / norm);
    }
}

/// Optimizer state plus an optional running mean of the iterates.
#[derive(Debug, Clone)]
pub struct OptState {
    kind: Optimizer,
    momentum: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
    avg: Vec<f64>,
    n_avg: usize,
}

impl OptState {
    pub fn new(kind: Optimizer, momentum: f64, n: usize) -> Self {
        Self { kind, momentum, m: vec![0.0; n], v: vec![0.0; n], steps: 0, avg: vec![0.0; n], n_avg: 0 }
    }

    /// Descent step `params -= lr * direction(grad)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            Optimizer::Sgd => {
                for ((p, m), g) in params.iter_mut().zip(&mut self.m).zip(grad) {
                    *m = self.momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                self.steps += 1;
                let c1 = 1.0 - B1.powi(self.steps);
                let c2 = 1.0 - B2.powi(self.steps);
                for (((p, m), v), g) in params.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grad) {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
                }
            }
        }
    }

    /// Adds `params` to the running mean.
    pub fn accumulate(&mut self, params: &[f64]) {
        self.n_avg += 1;
        let w = 1.0 / self.n_avg as f64;
        self.avg.iter_mut().zip(params).for_each(|(a, p)| *a += w * (p - *a));
    }

    /// Running mean, if any iterate was accumulated.
    pub fn average(&self) -> Option<&[f64]> {
        (self.n_avg > 0).then_some(&self.avg[..])
    }
}
