//! SGD with momentum and L2 weight decay, plus a step-decay schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Heavy-ball SGD over a fixed list of parameters.
///
/// Each step applies `v ← μ·v + (g + λ·θ)` then `θ ← θ − η·v`, and zeroes
/// the gradients it consumed.
#[derive(Debug)]
pub struct SgdState {
    params: Vec<Tensor>,
    velocity: Vec<Vec<f64>>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdState {
    pub fn new(params: Vec<Tensor>, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!("weight decay {weight_decay}")));
        }
        let velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Ok(Self {
            params,
            velocity,
            learning_rate,
            momentum,
            weight_decay,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }

    /// Applies one update. Fails before touching anything if a registered
    /// parameter has no gradient buffer.
    pub fn step(&mut self) -> Result<()> {
        let grads = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| p.grad().ok_or(Error::MissingGrad(i)))
            .collect::<Result<Vec<_>>>()?;
        for ((param, v), g) in self.params.iter().zip(&mut self.velocity).zip(grads) {
            let (mu, lambda, eta) = (self.momentum, self.weight_decay, self.learning_rate);
            param.update_values(|theta| {
                for ((t, v), g) in theta.iter_mut().zip(v.iter_mut()).zip(&g) {
                    *v = mu * *v + (g + lambda * *t);
                    *t -= eta * *v;
                }
            });
            param.zero_grad();
        }
        Ok(())
    }
}

/// Free-function form of [`SgdState::step`].
pub fn sgd_step(state: &mut SgdState) -> Result<()> {
    state.step()
}

/// Learning rate multiplied by `gamma` at each milestone epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDecay {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl StepDecay {
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.gamma.powi(passed as i32)
    }
}
