//! Decoupled-weight-decay adaptive optimizer and the triangular cyclic
//! learning-rate schedule used by the outer training loop.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::params::{GradMap, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum OptimError {
    /// A gradient was supplied for a name that is unknown or frozen.
    UnknownOrFrozen(String),
    /// A trainable parameter is missing from the gradient map.
    MissingGradient(String),
    ShapeMismatch { name: String },
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::UnknownOrFrozen(n) => {
                write!(f, "gradient supplied for unknown or frozen parameter `{n}`")
            }
            OptimError::MissingGradient(n) => {
                write!(f, "no gradient supplied for trainable parameter `{n}`")
            }
            OptimError::ShapeMismatch { name } => {
                write!(f, "gradient shape mismatch for parameter `{name}`")
            }
        }
    }
}

impl std::error::Error for OptimError {}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter first/second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamWState {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamWState {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One decoupled-weight-decay adaptive update. `grads` must cover the
    /// trainable set of `store` exactly; frozen tensors are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) -> Result<(), OptimError> {
        for name in grads.keys() {
            if !store.contains(name) || !store.is_trainable(name) {
                return Err(OptimError::UnknownOrFrozen(name.clone()));
            }
        }
        let trainable = store.trainable_names();
        for name in &trainable {
            if !grads.contains_key(name) {
                return Err(OptimError::MissingGradient(name.clone()));
            }
        }

        self.step += 1;
        let t = self.step;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);

        for name in &trainable {
            let g = &grads[name];
            let shape = store.tensor(name).unwrap().shape().to_vec();
            if g.shape() != shape.as_slice() {
                return Err(OptimError::ShapeMismatch { name: name.clone() });
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(shape.clone()));
            let p = store.tensor_mut(name).unwrap();
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                pd[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * pd[i]);
            }
        }
        Ok(())
    }
}

/// Triangular cyclic learning-rate schedule: starts at `lr_min`, peaks at
/// `lr_max` after `step_size_epochs`, returns to `lr_min` after a full
/// period of `2 * step_size_epochs`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CyclicSchedule {
    pub lr_min: f64,
    pub lr_max: f64,
    pub step_size_epochs: f64,
}

impl Default for CyclicSchedule {
    fn default() -> Self {
        CyclicSchedule {
            lr_min: 1e-7,
            lr_max: 1e-5,
            step_size_epochs: 12.0,
        }
    }
}

impl CyclicSchedule {
    pub fn lr_at(&self, epoch: f64) -> f64 {
        assert!(epoch >= 0.0, "epoch must be non-negative");
        let s = self.step_size_epochs;
        let phase = epoch.rem_euclid(2.0 * s);
        let tri = 1.0 - (phase - s).abs() / s;
        self.lr_min + (self.lr_max - self.lr_min) * tri
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(theta: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::scalar(theta), true).unwrap();
        s
    }

    fn grad_of(x: f64) -> GradMap {
        let mut g = GradMap::new();
        g.insert("theta".into(), Tensor::scalar(x));
        g
    }

    #[test]
    fn first_step_matches_hand_trace() {
        // theta = 1, g = 1, lr = 0.1, wd = 0:
        // m_hat = 1, v_hat = 1, theta' = 1 - 0.1 * 1/(1 + eps) ~= 0.9
        let mut store = scalar_store(1.0);
        let mut st = AdamWState::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        st.step(&mut store, &grad_of(1.0)).unwrap();
        let theta = store.tensor("theta").unwrap().item();
        assert!((theta - 0.9).abs() < 1e-6, "theta = {theta}");
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut store = scalar_store(1.5);
        let mut st = AdamWState::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        st.step(&mut store, &grad_of(0.0)).unwrap();
        assert_eq!(store.tensor("theta").unwrap().item(), 1.5);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks_multiplicatively() {
        let mut store = scalar_store(2.0);
        let mut st = AdamWState::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        });
        st.step(&mut store, &grad_of(0.0)).unwrap();
        let theta = store.tensor("theta").unwrap().item();
        assert!((theta - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15, "theta = {theta}");
    }

    #[test]
    fn rejects_gradient_for_frozen_or_unknown_names() {
        let mut store = scalar_store(1.0);
        store.insert("w", Tensor::scalar(0.0), false).unwrap();
        let mut st = AdamWState::new(AdamWConfig::default());

        let mut g = grad_of(1.0);
        g.insert("w".into(), Tensor::scalar(1.0));
        assert_eq!(
            st.step(&mut store, &g).unwrap_err(),
            OptimError::UnknownOrFrozen("w".into())
        );

        let mut g = grad_of(1.0);
        g.insert("nope".into(), Tensor::scalar(1.0));
        assert_eq!(
            st.step(&mut store, &g).unwrap_err(),
            OptimError::UnknownOrFrozen("nope".into())
        );

        let g = GradMap::new();
        assert_eq!(
            st.step(&mut store, &g).unwrap_err(),
            OptimError::MissingGradient("theta".into())
        );
    }

    #[test]
    fn step_is_deterministic() {
        let run = || {
            let mut store = scalar_store(0.7);
            let mut st = AdamWState::new(AdamWConfig::default());
            for k in 0..5 {
                st.step(&mut store, &grad_of(0.1 * k as f64 - 0.2)).unwrap();
            }
            store.tensor("theta").unwrap().item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn schedule_hits_the_anchor_points() {
        let s = CyclicSchedule::default();
        assert_eq!(s.lr_at(0.0), 1e-7);
        assert_eq!(s.lr_at(12.0), 1e-5);
        assert!((s.lr_at(24.0) - 1e-7).abs() < 1e-20);
    }

    #[test]
    fn schedule_is_periodic_and_bounded() {
        let s = CyclicSchedule::default();
        let mut max = f64::MIN;
        let mut min = f64::MAX;
        for i in 0..=4800 {
            let e = i as f64 * 0.01;
            let lr = s.lr_at(e);
            max = max.max(lr);
            min = min.min(lr);
            let lr2 = s.lr_at(e + 24.0);
            assert!((lr - lr2).abs() < 1e-18, "not periodic at {e}");
        }
        assert!((max - 1e-5).abs() < 1e-12);
        assert!((min - 1e-7).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_continuous() {
        let s = CyclicSchedule::default();
        for i in 1..=4800 {
            let e = i as f64 * 0.01;
            let delta = (s.lr_at(e) - s.lr_at(e - 0.01)).abs();
            // Slope is (lr_max - lr_min) / step_size per epoch.
            assert!(delta < 2.0 * (1e-5 - 1e-7) / 12.0 * 0.01 + 1e-15);
        }
    }
}
