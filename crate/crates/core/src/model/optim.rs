use serde::{Deserialize, Serialize};

use super::layers::{Group, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec { kind: OptimizerKind::Adam, lr_backbone: 1e-3, lr_head: 1e-3, weight_decay: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Multiplier on the base rates as a function of the 1-based epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Multiply by `gamma` once the epoch exceeds each milestone.
    MultiStep { milestones: Vec<u32>, gamma: f64 },
    /// Multiply by `gamma` after every `every` epochs.
    StepEvery { every: u32, gamma: f64 },
}

impl Schedule {
    pub fn factor(&self, epoch: u32) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::MultiStep { milestones, gamma } => gamma.powi(milestones.iter().filter(|&&m| epoch > m).count() as i32),
            Schedule::StepEvery { every, gamma } => gamma.powi((epoch.saturating_sub(1) / (*every).max(1)) as i32),
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl Adam {
    pub fn new() -> Adam {
        Adam::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Param], spec: &OptimizerSpec, lr_backbone: f64, lr_head: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - spec.beta1.powi(t);
        let bc2 = 1.0 - spec.beta2.powi(t);
        let (b1, b2, eps) = (spec.beta1 as f32, spec.beta2 as f32, spec.eps as f32);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = match p.group {
                Group::Backbone => lr_backbone,
                Group::Head => lr_head,
            };
            let step_size = (lr / bc1) as f32;
            let sqrt_bc2 = bc2.sqrt() as f32;
            let decay = match spec.kind {
                OptimizerKind::AdamW if !p.no_decay => (lr * spec.weight_decay) as f32,
                _ => 0.0,
            };
            let plain_l2 = match spec.kind {
                OptimizerKind::Adam => spec.weight_decay as f32,
                OptimizerKind::AdamW => 0.0,
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j] + plain_l2 * p.value[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                p.value[j] -= decay * p.value[j];
                p.value[j] -= step_size * m[j] / (v[j].sqrt() / sqrt_bc2 + eps);
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Param], max_norm: f64) -> f64 {
    let norm = params.iter().flat_map(|p| p.grad.iter()).map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        params.iter_mut().for_each(|p| p.grad.iter_mut().for_each(|g| *g *= s));
    }
    norm
}

pub fn grad_norm(params: &[&Param]) -> f64 {
    params.iter().flat_map(|p| p.grad.iter()).map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt()
}
