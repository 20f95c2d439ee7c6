//! Decoupled-weight-decay adaptive optimizer (AdamW) over tagged parameters.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::nets::TaggedParameters;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 5.0,
        }
    }
}

/// AdamW with per-parameter first/second moment state keyed by name.
pub struct AdamW<F: Scalar> {
    cfg: OptimConfig,
    lr: F,
    step: usize,
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            lr: F::zero(),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = F::cast(lr);
    }

    /// One update over every parameter that received a gradient.
    pub fn step(&mut self, params: &mut TaggedParameters<F>, grads: &BTreeMap<String, ArrayD<F>>) {
        self.step += 1;
        let b1 = F::cast(self.cfg.beta1);
        let b2 = F::cast(self.cfg.beta2);
        let eps = F::cast(self.cfg.eps);
        let wd = F::cast(self.cfg.weight_decay);
        let bc1 = F::one() - F::cast(self.cfg.beta1.powi(self.step as i32));
        let bc2 = F::one() - F::cast(self.cfg.beta2.powi(self.step as i32));

        let scale = if self.cfg.clip_norm > 0.0 {
            let total: f64 = grads
                .values()
                .map(|g| g.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>())
                .sum();
            let norm = total.sqrt();
            if norm > self.cfg.clip_norm {
                F::cast(self.cfg.clip_norm / norm)
            } else {
                F::one()
            }
        } else {
            F::one()
        };

        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(&mut p.array)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &graw| {
                    let g = graw * scale;
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - self.lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
    }
}
