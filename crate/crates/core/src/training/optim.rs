//! Losses, optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

pub const PROB_CLAMP: f64 = 1e-7;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of probability `p` against label `y`, with `p`
/// clamped to `[1e-7, 1 - 1e-7]`.
pub fn loss_bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Derivative of `loss_bce(sigmoid(z), y)` w.r.t. the logit `z`.
pub fn bce_logit_grad(z: f64, y: f64) -> f64 {
    let p = sigmoid(z);
    if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
        0.0
    } else {
        p - y
    }
}

pub fn loss_smooth_l1(pred: f64, target: f64, beta: f64) -> f64 {
    let e = (pred - target).abs();
    if e < beta {
        0.5 * e * e / beta
    } else {
        e - 0.5 * beta
    }
}

/// Derivative of `loss_smooth_l1` w.r.t. `pred`.
pub fn smooth_l1_grad(pred: f64, target: f64, beta: f64) -> f64 {
    let e = pred - target;
    if e.abs() < beta {
        e / beta
    } else {
        e.signum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-5,
            milestones: vec![30, 80, 150, 200, 250, 300, 350, 400, 450],
            gamma: 0.5,
        }
    }
}

impl AdamConfig {
    /// Multi-step schedule: the base rate times `gamma` per milestone reached.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.gamma.powi(passed as i32)
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One Adam update with bias correction; weight decay enters as an L2
/// gradient term.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) {
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i] + cfg.weight_decay * params[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdCyclicConfig {
    pub base_lr: f64,
    pub max_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step_size_up: usize,
    pub gamma: f64,
}

impl Default for SgdCyclicConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-5,
            max_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            step_size_up: 2000,
            gamma: 0.5,
        }
    }
}

impl SgdCyclicConfig {
    /// Triangular cycle between `base_lr` and `max_lr`; the peak amplitude is
    /// multiplied by `gamma` after every full cycle.
    pub fn lr_at_step(&self, step: usize) -> f64 {
        let s = self.step_size_up as f64;
        let cycle = (1.0 + step as f64 / (2.0 * s)).floor();
        let x = (step as f64 / s - 2.0 * cycle + 1.0).abs();
        let amplitude = (self.max_lr - self.base_lr) * (1.0 - x).max(0.0);
        self.base_lr + amplitude * self.gamma.powi(cycle as i32 - 1)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SgdState {
    buf: Vec<f64>,
    started: bool,
}

impl SgdState {
    pub fn new(n: usize) -> Self {
        Self {
            buf: vec![0.0; n],
            started: false,
        }
    }
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], state: &mut SgdState, lr: f64, cfg: &SgdCyclicConfig) {
    for i in 0..params.len() {
        let g = grads[i] + cfg.weight_decay * params[i];
        state.buf[i] = if state.started {
            cfg.momentum * state.buf[i] + g
        } else {
            g
        };
        params[i] -= lr * state.buf[i];
    }
    state.started = true;
}
