//! AdamW with decoupled weight decay.

use indexmap::IndexMap;

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::params::{Decay, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: IndexMap<String, Matrix>,
    pub v: IndexMap<String, Matrix>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(n, e)| (n.to_string(), Matrix::zeros(e.value.raw_dim())))
                .collect()
        };
        Self {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update at learning rate `lr`. Exempt parameters skip the decay.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Matrix)], lr: f64) -> Result<()> {
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let entry = params
                .entry_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("gradient for unknown parameter `{name}`")))?;
            let m = self.m.get_mut(name).expect("moment registered");
            let v = self.v.get_mut(name).expect("moment registered");
            if entry.decay == Decay::Apply && weight_decay > 0.0 {
                entry.value *= 1.0 - lr * weight_decay;
            }
            ndarray::Zip::from(&mut entry.value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Global L2 norm over every gradient array.
pub fn global_norm(grads: &[(String, Matrix)]) -> f64 {
    grads
        .iter()
        .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [(String, Matrix)], max_norm: f64) {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            *g *= s;
        }
    }
}
