//! Adam with a step-wise learning-rate schedule and an exponential moving
//! average of the parameters.

use stflow_tensor::Tensor;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiply the learning rate by `decay_rate` every `decay_every` updates.
    pub decay_every: u64,
    pub decay_rate: f64,
    pub ema_decay: f64,
    /// Global-norm clip; `None` disables it.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            decay_every: 200_000,
            decay_rate: 0.5,
            ema_decay: 0.999,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    /// `lr · decay_rate^⌊step / decay_every⌋`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let k = step / self.decay_every.max(1);
        self.lr * self.decay_rate.powi(k.min(i32::MAX as u64) as i32)
    }
}

/// Moment buffers and the shadow parameters, slot-aligned with a
/// [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub ema: Vec<Tensor>,
    /// Completed updates.
    pub step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            ema: params.values().to_vec(),
            step: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    /// Shadow decay for the next update, warmed up as `(1+t)/(10+t)` so the
    /// average is not dominated by the initial parameters early on.
    fn ema_decay(&self) -> f64 {
        let t = self.step as f64;
        self.config.ema_decay.min((1.0 + t) / (10.0 + t))
    }

    /// One bias-corrected Adam update of the trainable parameters, followed
    /// by the shadow update. Returns the learning rate used.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<f64> {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        for id in params.ids() {
            let g = &grads[id.index()];
            if g.shape() != params.get(id).shape() {
                return Err(Error::Input(format!(
                    "gradient shape {:?} for {}",
                    g.shape(),
                    params.name(id)
                )));
            }
            if params.is_trainable(id) && !g.is_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = params
                    .ids()
                    .filter(|&id| params.is_trainable(id))
                    .flat_map(|id| grads[id.index()].data().iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        let lr = self.current_lr();
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = self.ema_decay();
        for id in params.ids() {
            if !params.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g[k] * clip;
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            let shadow = self.ema[i].data_mut();
            for (s, &pk) in shadow.iter_mut().zip(p.iter()) {
                *s = decay * *s + (1.0 - decay) * pk;
            }
        }
        self.step += 1;
        Ok(lr)
    }

    /// A store holding the shadow values in place of the raw ones.
    pub fn ema_params(&self, params: &ParamStore) -> ParamStore {
        let mut out = params.clone();
        for (dst, src) in out.values_mut().iter_mut().zip(&self.ema) {
            *dst = src.clone();
        }
        out
    }

    /// Resets the shadow to the current parameters, e.g. after data-dependent
    /// initialization changed them.
    pub fn reset_ema(&mut self, params: &ParamStore) {
        self.ema = params.values().to_vec();
    }
}
