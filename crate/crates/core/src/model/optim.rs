use serde::{Deserialize, Serialize};

use super::params::{ModelParams, Trainable};
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-5,
            warmup_steps: 100,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_lr >= 0.0
            && self.peak_lr.is_finite()
            && self.warmup_steps >= 1
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Linear warmup to `peak_lr`, constant afterwards.
pub fn schedule(step: usize, peak_lr: f64, warmup_steps: usize) -> f64 {
    peak_lr * (step as f64 / warmup_steps.max(1) as f64).min(1.0)
}

/// AdamW with bias correction and decoupled weight decay. Moments are kept in
/// f64 for every trainable tensor.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: usize,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new<T: Scalar>(params: &ModelParams<T>, trainable: &Trainable, config: AdamWConfig) -> Self {
        let moments = params
            .entries()
            .into_iter()
            .map(|(_, class, t)| trainable.allows(class).then(|| (vec![0.0; t.len()], vec![0.0; t.len()])))
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// Applies one update and returns the learning rate used. Nothing is
    /// modified when any trainable gradient is non-finite.
    pub fn step<T: Scalar>(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) -> Result<f64> {
        let grad_entries = grads.entries();
        if grad_entries.len() != self.moments.len() {
            return Err(Error::Shape("optimizer state does not match the parameter set".into()));
        }
        for ((name, _, g), mom) in grad_entries.iter().zip(&self.moments) {
            if mom.is_some() && g.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let lr = schedule(self.step, c.peak_lr, c.warmup_steps);
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (((_, _, p), (_, _, g)), mom) in params.entries_mut().into_iter().zip(grad_entries).zip(&mut self.moments) {
            let Some((m, v)) = mom else { continue };
            for i in 0..p.data.len() {
                let gi = g.data[i].f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                let pi = p.data[i].f64();
                p.data[i] = T::of(pi - lr * (update + c.weight_decay * pi));
            }
        }
        Ok(lr)
    }
}
