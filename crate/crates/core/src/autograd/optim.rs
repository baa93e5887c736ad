use std::collections::HashMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Only trainable parameters are touched.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: HashMap<ParamId, (Array2<f64>, Array2<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in store.trainable_ids() {
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Array2::zeros(g.raw_dim()), Array2::zeros(g.raw_dim())));
            Zip::from(&mut *m).and(g).for_each(|m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            Zip::from(&mut *v).and(g).for_each(|v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            if c.lr == 0.0 {
                continue;
            }
            let p = store.value_mut(id);
            let decay = 1.0 - c.lr * c.weight_decay;
            Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p = *p * decay - c.lr * mhat / (vhat.sqrt() + c.eps);
            });
        }
    }
}
