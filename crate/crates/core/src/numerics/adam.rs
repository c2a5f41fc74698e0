use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based) for every
/// non-frozen parameter, using the gradients currently stored.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, cfg: &AdamConfig, t: u64) {
    let t = t.max(1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let step = T::from_f64(cfg.learning_rate / c1);
    let inv_c2 = T::from_f64(1.0 / c2);
    let eps = T::from_f64(cfg.eps);
    for p in store.iter_mut() {
        if p.frozen {
            continue;
        }
        let g = p.grad.data();
        let m = p.first_moment.data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + one_b1 * gi;
        }
        let v = p.second_moment.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + one_b2 * gi * gi;
        }
        let (m, v) = (p.first_moment.data(), p.second_moment.data());
        for ((w, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            *w = *w - step * mi / ((vi * inv_c2).sqrt() + eps);
        }
    }
}

/// Adam with its own step counter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) {
        self.t += 1;
        adam_step(store, &self.config, self.t);
    }
}
