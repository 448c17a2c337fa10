use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{Real, Tensor};
use crate::params::ParamStore;

/// Gradients of several parameter groups, keyed by group then name.
pub type GroupGrads<T> = BTreeMap<String, BTreeMap<String, Tensor<T>>>;

pub fn global_norm<T: Real>(grads: &GroupGrads<T>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.values())
        .map(|t| t.sum_squares().as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `max_norm / (norm + 1e-6)` when the global norm
/// exceeds `max_norm`. Returns the norms before and after.
pub fn clip_global_norm<T: Real>(grads: &mut GroupGrads<T>, max_norm: f64) -> (f64, f64) {
    let norm = global_norm(grads);
    if norm <= max_norm || !norm.is_finite() {
        return (norm, norm);
    }
    let scale = T::of(max_norm / (norm + 1e-6));
    for g in grads.values_mut().flat_map(|g| g.values_mut()) {
        *g = g.map(|v| v * scale);
    }
    (norm, global_norm(grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    /// First and second moments, keyed `group/name`.
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update of every group in `grads`, applied to the matching store.
    pub fn update(&mut self, stores: &mut [(&str, &mut ParamStore<T>)], grads: &GroupGrads<T>, lr: f64) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1, c.beta2);
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        for (group, store) in stores.iter_mut() {
            let Some(group_grads) = grads.get(*group) else {
                continue;
            };
            for (name, g) in group_grads {
                let param = store.get(name)?;
                ensure!(
                    param.shape() == g.shape(),
                    "gradient for {}/{} has shape {:?}, parameter {:?}",
                    group,
                    name,
                    g.shape(),
                    param.shape()
                );
                let key = format!("{group}/{name}");
                let m = self.first.entry(key.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                let m_new = m.zip_map(g, |m, g| T::of(b1) * m + T::of(1.0 - b1) * g)?;
                *m = m_new.clone();
                let v = self.second.entry(key).or_insert_with(|| Tensor::zeros(g.shape()));
                let v_new = v.zip_map(g, |v, g| T::of(b2) * v + T::of(1.0 - b2) * g * g)?;
                *v = v_new.clone();
                let decay = T::of(1.0 - lr * c.weight_decay);
                let (lr_t, eps) = (T::of(lr), T::of(c.eps));
                let (bias1, bias2) = (T::of(bias1), T::of(bias2));
                let data: Vec<T> = param
                    .data()
                    .iter()
                    .zip(m_new.data().iter().zip(v_new.data()))
                    .map(|(&p, (&m, &v))| {
                        let m_hat = m / bias1;
                        let v_hat = v / bias2;
                        p * decay - lr_t * m_hat / (v_hat.sqrt() + eps)
                    })
                    .collect();
                store.set(name, Tensor::new(param.shape(), data)?)?;
            }
        }
        Ok(())
    }
}
