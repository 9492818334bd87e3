use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
            clip: 0.0,
        }
    }
}

/// Bias-corrected AdamW with decoupled decay. Decay applies only to parameters
/// flagged `decay` (projection matrices and embeddings; not LayerNorm, biases or SSM scalars).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn grad_norm(store: &ParamStore) -> f64 {
        store
            .iter()
            .filter(|(_, p)| p.trainable)
            .flat_map(|(_, p)| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// One update with learning rate `lr`, reading the accumulated grads.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some((_, p)) = store
            .iter()
            .find(|(_, p)| p.trainable && p.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        let scale = if self.cfg.clip > 0.0 {
            let n = Self::grad_norm(store);
            if n > self.cfg.clip {
                self.cfg.clip / n
            } else {
                1.0
            }
        } else {
            1.0
        };
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let decay = if p.decay { weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = p.grad[j] * scale;
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let upd = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                *w -= lr * (upd + decay * *w);
            }
        }
        Ok(())
    }

    /// Moments as named tensors for checkpointing.
    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * store.len());
        for (id, p) in store.iter() {
            out.push((format!("adam.m.{}", p.name), Tensor::vector(self.m[id.0].clone())));
            out.push((format!("adam.v.{}", p.name), Tensor::vector(self.v[id.0].clone())));
        }
        out
    }

    pub fn restore(
        cfg: AdamConfig,
        step: u64,
        store: &ParamStore,
        lookup: impl Fn(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut s = Self::new(cfg, store);
        s.step = step;
        for (id, p) in store.iter() {
            for (kind, dst) in [("m", &mut s.m[id.0]), ("v", &mut s.v[id.0])] {
                let name = format!("adam.{kind}.{}", p.name);
                let t = lookup(&name).ok_or_else(|| {
                    Error::format("checkpoint", format!("missing optimizer state `{name}`"))
                })?;
                if t.numel() != dst.len() {
                    return Err(Error::format("checkpoint", format!("`{name}` has the wrong size")));
                }
                *dst = t.into_data();
            }
        }
        Ok(s)
    }
}
