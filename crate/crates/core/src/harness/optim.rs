//! Learning-rate schedule and SGD with momentum.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::autograd::Mat;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup_lr: f64,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

/// Linear warmup from `warmup_lr` to `base_lr`, then a half cosine down to 0
/// at `total_steps`.
pub fn lr_schedule(step: usize, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        let t = step as f64 / s.warmup_steps as f64;
        return s.warmup_lr + (s.base_lr - s.warmup_lr) * t;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps).max(1) as f64;
    let t = ((step - s.warmup_steps) as f64 / span).min(1.0);
    0.5 * s.base_lr * (1.0 + (PI * t).cos())
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<ParamId, Mat>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: HashMap::new() }
    }

    /// `v ← μv + g + λp`, `p ← p − lr·v`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Mat)], lr: f64) {
        for (id, g) in grads {
            if !store.get(*id).trainable {
                continue;
            }
            let p = store.value_mut(*id);
            let mut d = g.clone();
            if self.weight_decay != 0.0 {
                d.scaled_add(self.weight_decay, p);
            }
            let v = self.velocity.entry(*id).or_insert_with(|| Mat::zeros(g.dim()));
            *v *= self.momentum;
            *v += &d;
            p.scaled_add(-lr, v);
        }
    }
}
