use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;

/// Stochastic gradient descent with momentum and L2 weight decay:
/// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·m·v`, where `m` is a per-tensor
/// learning-rate multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    multipliers: Vec<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    /// `multiplier(name)` gives the LR multiplier of each named parameter.
    pub fn new<M: Module>(model: &M, momentum: f64, weight_decay: f64, multiplier: impl Fn(&str) -> f64) -> Self {
        let params = model.params();
        Self {
            momentum,
            weight_decay,
            multipliers: params.iter().map(|(n, _)| multiplier(n)).collect(),
            velocity: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn reset(&mut self) {
        for v in &mut self.velocity {
            v.fill(0.0);
        }
    }

    pub fn step<M: Module>(&mut self, model: &mut M, grads: &M, lr: f64) -> Result<()> {
        let grads = grads.params();
        let mut params = model.params_mut();
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::ShapeMismatch("optimizer state does not match the model".into()));
        }
        for (k, ((_, p), (_, g))) in params.iter_mut().zip(&grads).enumerate() {
            let rate = lr * self.multipliers[k];
            let v = &mut self.velocity[k];
            for ((theta, grad), vel) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                let d = grad + self.weight_decay * *theta;
                *vel = self.momentum * *vel + d;
                *theta -= rate * *vel;
            }
        }
        Ok(())
    }
}
