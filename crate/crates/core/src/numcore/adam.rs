use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::Gradients;
use super::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam over a fixed subset of a [`ParamStore`]. Parameters outside the
/// subset are never touched, which is what scopes each training phase.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    params: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, params: Vec<ParamId>, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|&id| Array2::zeros(store.get(id).dim()))
            .collect();
        Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            step: 0,
            params,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Applies one update and consumes the gradients. Parameters without a
    /// gradient are skipped. Any non-finite gradient aborts the step before
    /// anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: Gradients) -> Result<()> {
        for &id in &self.params {
            if let Some(g) = grads.get(id) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(store.name(id).to_string()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, &id) in self.params.iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m)
                .and(&mut *v)
                .and(g)
                .and(store.get_mut(id))
                .for_each(|m, v, &g, p| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}
