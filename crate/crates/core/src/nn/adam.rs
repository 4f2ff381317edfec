//! Adam optimizer with optional cosine learning-rate decay.

use super::param::ParamStore;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl LrSchedule {
    /// Multiplier applied to the base learning rate at `step` of `total`.
    pub fn scale(&self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                if total == 0 {
                    1.0
                } else {
                    let r = (step as f64 / total as f64).min(1.0);
                    0.5 * (1.0 + (std::f64::consts::PI * r).cos())
                }
            }
        }
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: usize,
    m: HashMap<String, ArrayD<f64>>,
    v: HashMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, steps: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Applies one update. `lr_scale` folds in the schedule.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &HashMap<String, ArrayD<f64>>,
        lr_scale: f64,
    ) {
        self.steps += 1;
        let t = self.steps as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let lr = self.lr * lr_scale;
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            m.zip_mut_with(grad, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(grad, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let param = store.get_mut(name);
            ndarray::Zip::from(param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}
