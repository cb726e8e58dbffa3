use std::f64::consts::PI;

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name so
/// they survive checkpointing.
#[derive(Debug, Clone)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    pub(crate) step: u64,
    pub(crate) names: Vec<String>,
    pub(crate) m: Vec<Tensor<T>>,
    pub(crate) v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, p) in params.iter() {
            names.push(p.name.clone());
            m.push(Tensor::zeros(p.value.shape()));
            v.push(Tensor::zeros(p.value.shape()));
        }
        Self {
            config,
            step: 0,
            names,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.m)
            .zip(&self.v)
            .map(|((n, m), v)| (n.as_str(), m, v))
    }

    pub(crate) fn from_parts(
        config: AdamConfig,
        step: u64,
        names: Vec<String>,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
    ) -> Self {
        Self {
            config,
            step,
            names,
            m,
            v,
        }
    }

    /// One Adam update of every non-frozen parameter, then zeroes all grads.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.names.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, store has {}",
                self.names.len(),
                params.len()
            )));
        }
        for (i, (_, p)) in params.iter().enumerate() {
            if self.names[i] != p.name || self.m[i].shape() != p.value.shape() {
                return Err(Error::State(format!("no optimizer state for parameter {:?}", p.name)));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (ob1, ob2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step_size = T::lit(lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(eps);
        for (i, p) in params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + ob1 * g[j];
                v[j] = b2 * v[j] + ob2 * g[j] * g[j];
                *w -= step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        params.zero_grad();
        Ok(())
    }
}

/// Cosine annealing from `base` to `min` over `total` steps.
pub fn cosine_lr(base: f64, min: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    min + 0.5 * (base - min) * (1.0 + (PI * t).cos())
}
