//! SGD and Adam with a step-wise exponential learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

fn one() -> f64 {
    1.0
}

fn fifty() -> usize {
    50
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn adam_eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "one")]
    pub decay_factor: f64,
    #[serde(default = "fifty")]
    pub decay_every: usize,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            decay_factor: 1.0,
            decay_every: fifty(),
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            ..Self::sgd(lr)
        }
    }

    pub fn with_decay(mut self, factor: f64, every: usize) -> Self {
        self.decay_factor = factor;
        self.decay_every = every;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config(format!(
                "decay factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::config("decay_every must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::config("adam betas must be in [0, 1) and eps positive"));
        }
        Ok(())
    }

    /// `lr * decay_factor ^ floor(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Adam moments per parameter (empty for SGD) and the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Applies one update to every trainable parameter using its accumulated gradient.
pub fn optimizer_step(state: &mut OptimizerState, params: &mut ParamStore, config: &OptimizerConfig, lr: f64) {
    state.step += 1;
    let lr32 = lr as f32;
    match config.kind {
        OptimizerKind::Sgd => {
            for p in params.iter_mut().filter(|p| p.trainable) {
                for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                    *w -= lr32 * g;
                }
            }
        }
        OptimizerKind::Adam => {
            if state.m.len() != params.len() {
                state.m = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
                state.v = state.m.clone();
            }
            let (b1, b2) = (config.beta1, config.beta2);
            let c1 = 1.0 - b1.powi(state.step as i32);
            let c2 = 1.0 - b2.powi(state.step as i32);
            let (b1, b2, eps) = (b1 as f32, b2 as f32, config.eps as f32);
            let (c1, c2) = (c1 as f32, c2 as f32);
            for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
                if !p.trainable {
                    continue;
                }
                let grads = p.grad.data();
                let values = p.value.data_mut();
                for (((w, &g), m), v) in values
                    .iter_mut()
                    .zip(grads)
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *w -= lr32 * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f32, g: f32) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::new(vec![1], vec![v]).unwrap(), true);
        s.get_mut(id).grad = Tensor::new(vec![1], vec![g]).unwrap();
        s
    }

    #[test]
    fn sgd_arithmetic() {
        let mut s = store(1.0, 0.5);
        let cfg = OptimizerConfig::sgd(0.1);
        optimizer_step(&mut OptimizerState::default(), &mut s, &cfg, cfg.lr_at(0));
        assert!((s.iter().next().unwrap().1.value.item() - 0.95).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        for cfg in [OptimizerConfig::sgd(0.1), OptimizerConfig::adam(1e-3)] {
            let mut s = store(1.0, 0.3);
            let mut st = OptimizerState::default();
            optimizer_step(&mut st, &mut s, &cfg, cfg.lr);
            let before = s.iter().next().unwrap().1.value.clone();
            // a warm Adam state whose first moment has decayed is not required:
            // zero gradient with zeroed moments must leave values alone
            st.m.iter_mut().for_each(|m| m.data_mut().fill(0.0));
            s.zero_grad();
            optimizer_step(&mut st, &mut s, &cfg, cfg.lr);
            assert_eq!(s.iter().next().unwrap().1.value, before);
        }
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut s = ParamStore::new();
        let id = s.add("stat", Tensor::full(&[2], 1.0), false);
        s.get_mut(id).grad = Tensor::full(&[2], 1.0);
        optimizer_step(&mut OptimizerState::default(), &mut s, &OptimizerConfig::adam(0.1), 0.1);
        assert_eq!(s.get(id).value.data(), &[1.0, 1.0]);
    }

    #[test]
    fn schedule() {
        let cfg = OptimizerConfig::sgd(8e-2).with_decay(0.9, 50);
        assert_eq!(cfg.lr_at(49), 8e-2);
        assert!((cfg.lr_at(50) - 7.2e-2).abs() < 1e-12);
        assert!((cfg.lr_at(100) - 6.48e-2).abs() < 1e-12);
        assert!(OptimizerConfig::sgd(0.0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1).with_decay(1.5, 10).validate().is_err());
    }
}
