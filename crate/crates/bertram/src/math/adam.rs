//! Adam with bias correction and a linear warmup / linear decay schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::math::tensor::Parameter;

/// Learning-rate schedule applied on top of the peak rate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum Schedule {
    Constant,
    /// Ramp linearly from 0 over the first `warmup_frac` of `total_steps`,
    /// then decay linearly back to 0 at `total_steps`.
    WarmupLinearDecay { total_steps: usize, warmup_frac: f32 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub schedule: Schedule,
}

impl AdamConfig {
    pub fn new(lr: f32) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            schedule: Schedule::Constant,
        }
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }
}

/// Optimizer state: step count plus first/second moment arrays, keyed by
/// parameter name so the set of live parameters may differ between stages.
pub struct Adam {
    cfg: AdamConfig,
    step: usize,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Effective learning rate for a 1-based step index.
    pub fn lr_at(&self, step: usize) -> f32 {
        match self.cfg.schedule {
            Schedule::Constant => self.cfg.lr,
            Schedule::WarmupLinearDecay {
                total_steps,
                warmup_frac,
            } => {
                let total = total_steps.max(1) as f32;
                let warmup = (total * warmup_frac).round().max(0.0);
                let t = step as f32;
                if t <= warmup && warmup > 0.0 {
                    self.cfg.lr * t / warmup
                } else if t >= total {
                    0.0
                } else {
                    self.cfg.lr * (total - t) / (total - warmup).max(1.0)
                }
            }
        }
    }

    /// One update over the unfrozen parameters; gradients are cleared on all
    /// of them afterwards. Frozen parameters are left bit-identical and their
    /// moments are not advanced.
    pub fn step(&mut self, params: &mut [&mut Parameter]) {
        self.step += 1;
        let lr = self.lr_at(self.step);
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for p in params.iter_mut() {
            if p.frozen() {
                continue;
            }
            let n = p.value().numel();
            let (m, v) = self
                .moments
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            debug_assert_eq!(m.len(), n, "moment shape drift for {}", p.name());
            let grad = p.grad().to_vec();
            let data = p.value_mut().data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.cfg.epsilon);
            }
            p.zero_grad();
        }
    }
}
