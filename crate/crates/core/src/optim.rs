//! Adam with bias correction.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, ParamStore, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients accumulated in `store`.
    ///
    /// Gradients are validated first; a non-finite entry aborts the step with
    /// no parameter or moment touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::shape("adam_step", &[self.m.len()], &[store.len()]));
        }
        for (id, (name, t)) in store.ids().zip(store.iter()) {
            if self.m[id.index()].len() != t.len() {
                return Err(Error::shape("adam_step", &[self.m[id.index()].len()], t.shape()));
            }
            if !math::all_finite(t.grad()) {
                return Err(Error::NonFiniteGradient { name: name.into() });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - math::powi(beta1, t);
        let c2 = 1.0 - math::powi(beta2, t);
        for ((tensor, m), v) in store.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let (data, grad) = tensor.data_and_grad_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= lr * m_hat / (math::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}
