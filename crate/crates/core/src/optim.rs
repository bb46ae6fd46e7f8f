//! AdamW with decoupled weight decay and a reduce-on-plateau learning-rate rule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};

/// Moments of one parameter, stored at parameter precision.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Keyed by parameter name so checkpoints stay readable.
    pub state: BTreeMap<String, AdamState>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, state: BTreeMap::new() }
    }

    /// One update of every listed parameter that holds a gradient. Frozen
    /// parameters and parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64) {
        for &id in ids {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let n = p.tensor.len();
            let st = self
                .state
                .entry(p.name.clone())
                .or_insert_with(|| AdamState { step: 0, m: vec![0.0; n], v: vec![0.0; n] });
            st.step += 1;
            let bc1 = 1.0 - self.beta1.powi(st.step as i32);
            let bc2 = 1.0 - self.beta2.powi(st.step as i32);
            let decay = if p.no_decay { 1.0 } else { 1.0 - lr * self.weight_decay };
            let grad = grad.data().to_vec();
            let data = p.tensor.data_mut();
            for i in 0..n {
                let g = grad[i] as f64;
                let m = self.beta1 * st.m[i] as f64 + (1.0 - self.beta1) * g;
                let v = self.beta2 * st.v[i] as f64 + (1.0 - self.beta2) * g * g;
                st.m[i] = m as f32;
                st.v[i] = v as f32;
                let update = (m / bc1) / ((v / bc2).sqrt() + self.eps);
                data[i] = (data[i] as f64 * decay - lr * update) as f32;
            }
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored metric
/// (maximised) has failed to improve by more than `min_delta` for
/// `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub cooldown: usize,
    pub min_delta: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub cooldown_left: usize,
}

pub const PLATEAU_MIN_DELTA: f64 = 1e-6;

impl Plateau {
    pub fn new(factor: f64, patience: usize, cooldown: usize) -> Self {
        Self { factor, patience, cooldown, min_delta: PLATEAU_MIN_DELTA, best: None, bad_epochs: 0, cooldown_left: 0 }
    }

    /// Feeds one epoch's metric and returns the learning rate for the next epoch.
    pub fn step(&mut self, lr: f64, metric: f64) -> Result<f64> {
        if !metric.is_finite() {
            return Err(Error::Invalid(format!("plateau metric must be finite, got {metric}")));
        }
        match self.best {
            Some(b) if metric <= b + self.min_delta => self.bad_epochs += 1,
            _ => {
                self.best = Some(metric);
                self.bad_epochs = 0;
            }
        }
        if self.cooldown_left > 0 {
            self.cooldown_left -= 1;
            self.bad_epochs = 0;
        }
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            self.cooldown_left = self.cooldown;
            return Ok(lr * self.factor);
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f32, grad: f32) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[1], value));
        store.accumulate_grad(id, &[grad]);
        (store, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = one_param(1.0, 1.0);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut store, &[id], 0.1);
        assert!((store.tensor(id).data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let (mut store, id) = one_param(0.37, 0.0);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        for _ in 0..5 {
            opt.step(&mut store, &[id], 0.1);
        }
        assert_eq!(store.tensor(id).data()[0], 0.37);
    }

    #[test]
    fn decay_is_decoupled_and_skips_no_decay() {
        let (mut store, id) = one_param(2.0, 0.0);
        let lam = store.add("lambda", Tensor::full(&[1], 2.0));
        store.set_no_decay(lam);
        store.accumulate_grad(lam, &[0.0]);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.5);
        opt.step(&mut store, &[id, lam], 0.1);
        assert!((store.tensor(id).data()[0] - 1.9).abs() < 1e-6);
        assert_eq!(store.tensor(lam).data()[0], 2.0);
    }

    #[test]
    fn params_without_grad_keep_no_state() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[2], 1.0));
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.01);
        opt.step(&mut store, &[id], 0.1);
        assert!(opt.state.is_empty());
        assert_eq!(store.tensor(id).data(), &[1.0, 1.0]);
    }

    #[test]
    fn plateau_rules() {
        let mut p = Plateau::new(0.9, 5, 0);
        let mut lr = 5e-4;
        for e in 0..10 {
            lr = p.step(lr, e as f64).unwrap();
        }
        assert_eq!(lr, 5e-4);

        let mut p = Plateau::new(0.9, 5, 0);
        let mut lr = 5e-4;
        let mut history = vec![];
        for _ in 0..11 {
            lr = p.step(lr, 0.5).unwrap();
            history.push(lr);
        }
        assert_eq!(history[4], 5e-4);
        assert!((history[5] - 4.5e-4).abs() < 1e-15);
        assert!((history[9] - 4.5e-4).abs() < 1e-15);
        assert!((history[10] - 5e-4 * 0.81).abs() < 1e-15);
        assert!(p.step(lr, f64::NAN).is_err());
    }

    #[test]
    fn tiny_gains_count_as_stalls() {
        let mut p = Plateau::new(0.5, 2, 0);
        let mut lr = 1.0;
        for m in [1.0, 1.0 + 5e-7, 1.0 + 9e-7] {
            lr = p.step(lr, m).unwrap();
        }
        assert_eq!(lr, 0.5);
    }

    #[test]
    fn cooldown_suspends_counting() {
        let mut p = Plateau::new(0.5, 1, 2);
        let mut lr = 1.0;
        let mut seen = vec![];
        for _ in 0..6 {
            lr = p.step(lr, 0.0).unwrap();
            seen.push(lr);
        }
        assert_eq!(seen, vec![1.0, 0.5, 0.5, 0.5, 0.25, 0.25]);
    }
}
