//! Descent rules and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::ModelParams;

/// Euclidean norm of all gradient buffers together; missing buffers count
/// as zero.
pub fn global_grad_norm(params: &ModelParams) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient by `min(1, clip / norm)`; returns the norm
/// before clipping.
pub fn clip_grad_norm(params: &mut ModelParams, clip: f64) -> f64 {
    let norm = global_grad_norm(params);
    if norm > clip && norm > 0.0 {
        let s = clip / norm;
        for (_, t) in params.iter_mut() {
            let Some(g) = t.grad() else { continue };
            let scaled: Vec<f32> = g.iter().map(|&v| (v as f64 * s) as f32).collect();
            t.zero_grad();
            t.accumulate_grad(&scaled).expect("same length");
        }
    }
    norm
}

/// Heavy-ball descent: `vel ← μ·vel + g`, `p ← p − lr·vel`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid("Sgd", format!("learning rate {lr} must be finite and >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("Sgd", format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    /// Applies one update from the gradient buffers; tensors without a
    /// gradient are left alone.
    pub fn step(&mut self, params: &mut ModelParams) {
        for (path, t) in params.iter_mut() {
            let Some(g) = t.grad() else { continue };
            let vel = self
                .velocity
                .entry(path.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (v, &gi) in vel.iter_mut().zip(g) {
                *v = self.momentum * *v + gi as f64;
            }
            if self.lr == 0.0 {
                continue;
            }
            let vel = &self.velocity[path];
            for (p, v) in t.data_mut().iter_mut().zip(vel) {
                *p = (*p as f64 - self.lr * v) as f32;
            }
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept in f64 and
/// bias-corrected, so the first step moves each weight by about `lr` along
/// the sign of its gradient whatever the gradient's scale.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid("AdamW", format!("learning rate {lr} must be finite and >= 0")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::invalid("AdamW", format!("weight decay {weight_decay} must be finite and >= 0")));
        }
        Ok(AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn step(&mut self, params: &mut ModelParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (path, t) in params.iter_mut() {
            let Some(g) = t.grad() else { continue };
            let g: Vec<f64> = g.iter().map(|&v| v as f64).collect();
            let (m, v) = self
                .moments
                .entry(path.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(&g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            if self.lr == 0.0 {
                continue;
            }
            for ((p, mi), vi) in t.data_mut().iter_mut().zip(m.iter()).zip(v.iter()) {
                let update = (mi / c1) / ((vi / c2).sqrt() + self.eps);
                let decayed = *p as f64 * (1.0 - self.lr * self.weight_decay);
                *p = (decayed - self.lr * update) as f32;
            }
        }
    }
}

/// The descent rule a training run uses.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd(Sgd),
    AdamW(AdamW),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut ModelParams) {
        match self {
            Optimizer::Sgd(o) => o.step(params),
            Optimizer::AdamW(o) => o.step(params),
        }
    }
}

impl From<Sgd> for Optimizer {
    fn from(o: Sgd) -> Self {
        Optimizer::Sgd(o)
    }
}

impl From<AdamW> for Optimizer {
    fn from(o: AdamW) -> Self {
        Optimizer::AdamW(o)
    }
}
