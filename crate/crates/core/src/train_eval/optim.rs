use weaksig_tensor::ParamStore;

use crate::error::{validation, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// One AdamW update of a flat parameter block; `t` is the 1-based step.
///
/// ```text
/// p ← p − lr·wd·p
/// m ← β₁m + (1 − β₁)g,  v ← β₂v + (1 − β₂)g²
/// p ← p − lr · m̂ / (√v̂ + ε),  m̂ = m / (1 − β₁ᵗ),  v̂ = v / (1 − β₂ᵗ)
/// ```
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(validation(format!(
            "adamw: parameter block of {n} with gradient {}, moments {}/{}",
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(validation("adamw: step counter starts at 1"));
    }
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..n {
        params[i] -= lr * cfg.weight_decay * params[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grads[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
    }
    Ok(())
}

/// AdamW over the trainable entries of a [`ParamStore`]. Entries without a
/// gradient in a step are left untouched, decay included.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros = || store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        Self { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `grads` is indexed like `store.entries()`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(validation("adamw: gradient list does not match the parameter store"));
        }
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let entry = store.get_mut(id);
            if let (true, Some(g)) = (entry.trainable, &grads[i]) {
                adamw_step(&mut entry.data, g, &mut self.m[i], &mut self.v[i], self.t, lr, &self.cfg)?;
            }
        }
        Ok(())
    }
}
