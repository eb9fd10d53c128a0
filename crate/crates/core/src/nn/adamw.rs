use std::collections::BTreeMap;

use super::param::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{cast, Real};

pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    /// Per-group learning rates overriding `lr`.
    pub group_lr: BTreeMap<String, f64>,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            group_lr: BTreeMap::new(),
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }
}

impl AdamWConfig {
    pub fn lr_for(&self, group: &str) -> f64 {
        self.group_lr.get(group).copied().unwrap_or(self.lr)
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, ps: &ParamStore<T>) -> Self {
        let zeros = || ps.iter().map(|(_, p)| vec![T::zero(); p.data.len()]).collect();
        AdamW {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update to every parameter outside frozen groups. The step
    /// counter advances once per call.
    pub fn step(&mut self, ps: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        let ids: Vec<_> = ps.iter().map(|(id, _)| id).collect();
        for &id in &ids {
            let p = ps.param(id);
            if grads.get(id).len() != p.data.len() {
                return Err(Error::shape(
                    format!("gradient of {}", p.name),
                    format!("{} values for {}", grads.get(id).len(), p.data.len()),
                ));
            }
            if !ps.is_frozen(id) && grads.get(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let (b1, b2) = self.config.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t) = (cast::<T>(b1), cast::<T>(b2));
        let (one_b1, one_b2) = (cast::<T>(1.0 - b1), cast::<T>(1.0 - b2));
        let eps = cast::<T>(self.config.eps);
        for id in ids {
            if ps.is_frozen(id) {
                continue;
            }
            let lr = self.config.lr_for(&ps.param(id).group);
            let decay = cast::<T>(1.0 - lr * self.config.weight_decay);
            let step_size = cast::<T>(lr / bc1);
            let inv_bc2_sqrt = cast::<T>(1.0 / bc2.sqrt());
            let g = grads.get(id);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let data = ps.get_mut(id);
            for i in 0..data.len() {
                m[i] = b1t * m[i] + one_b1 * g[i];
                v[i] = b2t * v[i] + one_b2 * g[i] * g[i];
                let denom = v[i].sqrt() * inv_bc2_sqrt + eps;
                data[i] = data[i] * decay - step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}
