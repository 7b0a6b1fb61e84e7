use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with weight decay applied directly to the parameters rather than
/// folded into the gradient:
/// `p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    /// Steps taken so far.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. `grads[i]` belongs to the i-th parameter of `store`;
    /// `None` is a zero gradient. Nothing is modified when any gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Optimizer(format!(
                "{} gradients / {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        for (p, g) in store.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.tensor.len() {
                    return Err(Error::Optimizer(format!(
                        "gradient for {} has {} entries, parameter has {}",
                        p.name,
                        g.len(),
                        p.tensor.len()
                    )));
                }
                if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Optimizer(format!("non-finite gradient at {}[{k}]", p.name)));
                }
            }
        }
        let AdamWConfig {
            lr,
            weight_decay: wd,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.cfg;
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].as_deref();
            for (k, x) in p.tensor.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *x = *x - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * *x;
            }
        }
        Ok(())
    }
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for v in grads.iter_mut().flatten().flat_map(|g| g.iter_mut()) {
            *v *= k;
        }
    }
    norm
}
