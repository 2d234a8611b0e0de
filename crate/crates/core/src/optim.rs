//! Adaptive-moment optimiser over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "optimizer needs betas in [0, 1), eps > 0 and weight_decay >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    lr: f64,
    /// Largest admissible parameter magnitude after a step.
    limit: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            lr,
            limit: f64::MAX,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Rejects steps that would push any parameter beyond `limit` in
    /// magnitude, e.g. `f32::MAX` when parameters must survive an `f32` save.
    pub fn with_limit(mut self, limit: f64) -> Self {
        self.limit = limit;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One bias-corrected update. Parameters absent from `grads` still decay
    /// their moments, matching dense-gradient semantics. All-or-nothing: if
    /// any moment would be non-finite or any parameter would leave
    /// `[-limit, limit]`, nothing changes and [`Error::Numerical`] is returned.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        let step = self.step + 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(step as i32);
        let c2 = 1.0 - beta2.powi(step as i32);
        let mut dense: Vec<Option<&Tensor>> = vec![None; self.m.len()];
        for (id, g) in grads {
            dense[id.index()] = Some(g);
        }
        let ids: Vec<ParamId> = store.ids().collect();
        let mut staged = Vec::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            let param = store.get(id).data();
            let (m0, v0) = (self.m[i].data(), self.v[i].data());
            let mut m = Vec::with_capacity(param.len());
            let mut v = Vec::with_capacity(param.len());
            let mut p = Vec::with_capacity(param.len());
            for (k, &w) in param.iter().enumerate() {
                let g = dense[i].map_or(0.0, |t| t.data()[k]) + weight_decay * w;
                let mk = beta1 * m0[k] + (1.0 - beta1) * g;
                let vk = beta2 * v0[k] + (1.0 - beta2) * g * g;
                let next = w - self.lr * ((mk / c1) / ((vk / c2).sqrt() + eps));
                if !(next.abs() <= self.limit && mk.is_finite() && vk.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "optimizer step {step} would overflow {}",
                        store.name(id)
                    )));
                }
                m.push(mk);
                v.push(vk);
                p.push(next);
            }
            staged.push((m, v, p));
        }
        for (i, (m, v, p)) in staged.into_iter().enumerate() {
            self.m[i].data_mut().copy_from_slice(&m);
            self.v[i].data_mut().copy_from_slice(&v);
            store.get_mut(ids[i]).data_mut().copy_from_slice(&p);
        }
        self.step = step;
        Ok(())
    }
}
