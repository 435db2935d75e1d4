//! AdamW with decoupled weight decay, plus the warmup schedule.

use super::objective::Grads;
use crate::config::{ModelConfig, OptimConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Linear ramp from `warmup_lr` at step 0 to the base rate at
/// `warmup_steps`, constant afterwards.
pub fn warmup_lr(step: usize, cfg: &ModelConfig) -> f64 {
    let base = cfg.base_lr();
    let w = cfg.optim.warmup_steps;
    if step >= w {
        return base;
    }
    let t = step as f64 / w as f64;
    cfg.optim.warmup_lr + (base - cfg.optim.warmup_lr) * t
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamW { step: 0, m: zeros(), v: zeros() }
    }

    /// One update at learning rate `lr`. Frozen parameters are left alone;
    /// a non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64, cfg: &OptimConfig) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Misuse(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        for (p, g) in store.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::shape("optimizer step", g.shape(), p.value.shape()));
            }
            if !p.frozen {
                if let Some(bad) = g.data().iter().position(|x| !x.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "gradient of {} is {} at index {bad}",
                        p.name,
                        g.data()[bad]
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let decay = 1.0 - lr * cfg.weight_decay;
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.param_mut(id);
            if p.frozen {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (theta, &g)) in p.value.data_mut().iter_mut().zip(grads[k].data()).enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *theta = *theta * decay - lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
