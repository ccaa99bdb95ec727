//! AdamW with global gradient-norm clipping.

use std::collections::{BTreeMap, HashMap};

use crate::config::Config;
use crate::numerics::{ParamStore, Real, Tensor};

/// Gradient sums keyed by parameter name, kept in 64-bit. Ordered so
/// reductions are reproducible.
#[derive(Clone, Debug, Default)]
pub struct GradAccumulator {
    sums: BTreeMap<String, Vec<f64>>,
}

impl GradAccumulator {
    pub fn add<'a, T: Real>(&mut self, grads: impl Iterator<Item = (&'a str, &'a Tensor<T>)>, scale: f64) {
        for (name, g) in grads {
            let slot = self.sums.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for (s, v) in slot.iter_mut().zip(g.data()) {
                *s += scale * v.to_f64().unwrap_or(f64::NAN);
            }
        }
    }

    pub fn merge(&mut self, other: &GradAccumulator, scale: f64) {
        for (name, g) in &other.sums {
            let slot = self.sums.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (s, v) in slot.iter_mut().zip(g) {
                *s += scale * v;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.sums.get(name).map(|v| v.as_slice())
    }

    pub fn norm(&self) -> f64 {
        self.sums.values().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.sums.values().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: f64,
    step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            clip: cfg.grad_clip,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update in parameter order. Decay applies to weight matrices
    /// only, not to vectors such as biases and norm gains. Returns the
    /// gradient norm before clipping.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &GradAccumulator) -> f64 {
        let norm = grads.norm();
        let factor = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = params.expect(&name);
            let decay = p.rows() > 1 && p.cols() > 1;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut data: Vec<f64> = p.data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
            for i in 0..data.len() {
                let gi = g[i] * factor;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                if decay {
                    data[i] -= self.lr * self.weight_decay * data[i];
                }
                data[i] -= self.lr * update;
            }
            let shape = p.shape().to_vec();
            params.insert(name, Tensor::new(shape, data.into_iter().map(T::lit).collect()).expect("same shape"));
        }
        norm
    }
}
