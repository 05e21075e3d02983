//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter in store order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            step: 0,
            m: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }
}

/// Applies one Adam update from the gradient buffers held in `store`.
/// Frozen parameters are skipped entirely.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    if state.m.len() != store.len() {
        return Err(Error::Config(format!(
            "optimizer state covers {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        if p.frozen {
            continue;
        }
        let Some(grad) = p.value.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Parameter, Tensor};

    fn scalar_store(value: f64, grad: f64, frozen: bool) -> ParamStore {
        let mut s = ParamStore::new();
        let p = if frozen {
            Parameter::frozen("w", Tensor::scalar(value))
        } else {
            Parameter::new("w", Tensor::scalar(value))
        };
        s.add(p);
        s.iter_mut().next().unwrap().value.grad_mut().unwrap()[0] = grad;
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(0.37, 0.0, false);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data(), &[0.37]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0, 1.0, false);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut s, &mut st, &cfg).unwrap();
        // m̂ = 1, v̂ = 1, step = 0.1 / (1 + 1e-8)
        let w = s.iter().next().unwrap().value.data()[0];
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((w - 0.9).abs() < 1e-8);
    }

    #[test]
    fn frozen_param_unchanged() {
        let mut s = scalar_store(1.0, 5.0, true);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.0]);
    }

    #[test]
    fn nonpositive_lr_rejected() {
        let mut s = scalar_store(1.0, 1.0, false);
        let mut st = AdamState::new(&s);
        for lr in [0.0, -1.0] {
            let cfg = AdamConfig {
                lr,
                ..AdamConfig::default()
            };
            assert!(matches!(adam_step(&mut s, &mut st, &cfg), Err(Error::Config(_))));
        }
    }
}
