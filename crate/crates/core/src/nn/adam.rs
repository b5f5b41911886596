use serde::{Deserialize, Serialize};

use super::{ParamSet, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every trainable tensor in the set.
pub fn adam_step<T: Real>(params: &mut ParamSet<T>, cfg: &AdamConfig) {
    params.step += 1;
    let t = params.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let step = T::of(cfg.lr / c1);
    let inv_c2 = T::of(1.0 / c2);
    let eps = T::of(cfg.eps);
    for p in params.params.iter_mut().filter(|p| p.trainable) {
        for i in 0..p.value.data.len() {
            let g = p.grad[i];
            p.m[i] = b1 * p.m[i] + one_b1 * g;
            p.v[i] = b2 * p.v[i] + one_b2 * g * g;
            p.value.data[i] = p.value.data[i] - step * p.m[i] / ((p.v[i] * inv_c2).sqrt() + eps);
        }
    }
}
