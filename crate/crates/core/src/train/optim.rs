use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Grads, ParamId, ParamStore};
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub(crate) m: Vec<Option<Tensor>>,
    pub(crate) v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        Self {
            config,
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        Some((self.m[id.index()].as_ref()?, self.v[id.index()].as_ref()?))
    }

    pub(crate) fn set_moments(&mut self, id: ParamId, m: Tensor, v: Tensor) {
        self.m[id.index()] = Some(m);
        self.v[id.index()] = Some(v);
    }

    /// Updates every trainable parameter that has a gradient. Nothing is
    /// modified if any gradient is non-finite.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        for (id, g) in grads.iter() {
            if store.is_trainable(id) && !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.get(id).name)));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.value_mut(id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let g = g as f64;
                let mn = c.beta1 * *m as f64 + (1.0 - c.beta1) * g;
                let vn = c.beta2 * *v as f64 + (1.0 - c.beta2) * g * g;
                *m = mn as Elem;
                *v = vn as Elem;
                let m_hat = mn / bc1;
                let v_hat = vn / bc2;
                let pv = *p as f64;
                *p = (pv - lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * pv)) as Elem;
            }
        }
        Ok(())
    }
}

/// `lr(t) = lr0 * (1 - t/T) + lr_final * t/T`, clamped to `t <= T`.
pub fn linear_decay(lr0: f64, lr_final: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let f = t.min(total) as f64 / total as f64;
    lr0 * (1.0 - f) + lr_final * f
}
