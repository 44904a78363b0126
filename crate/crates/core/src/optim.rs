//! AdamW with global-norm clipping and the cosine learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5, grad_clip_norm: 0.5 }
    }
}

/// Moment accumulators for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        OptimizerState { m: vec![0.0; dim], v: vec![0.0; dim], step: 0 }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One AdamW step with decoupled weight decay.
pub fn adamw_step(params: &mut [f64], grad: &[f64], state: &mut OptimizerState, lr: f64, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
    }
}

/// Cosine decay from `lr_initial` at round 0 to `lr_min` at `total_rounds`.
pub fn lr_at(round: u32, total_rounds: u32, lr_initial: f64, lr_min: f64) -> f64 {
    if total_rounds == 0 {
        return lr_initial;
    }
    let x = (round.min(total_rounds) as f64) / total_rounds as f64;
    lr_min + 0.5 * (lr_initial - lr_min) * (1.0 + (PI * x).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert!((lr_at(0, 30, 1e-4, 5e-6) - 1e-4).abs() < 1e-18);
        assert!((lr_at(30, 30, 1e-4, 5e-6) - 5e-6).abs() < 1e-18);
        assert!((lr_at(15, 30, 1e-4, 5e-6) - 5.25e-5).abs() < 1e-15);
        assert!(lr_at(10, 30, 1e-4, 5e-6) > lr_at(11, 30, 1e-4, 5e-6));
    }

    #[test]
    fn clipping_scales_to_half() {
        let mut a = [6.0, 0.0];
        let mut b = [8.0];
        let n = clip_global_norm(&mut [&mut a, &mut b], 0.5);
        assert_eq!(n, 10.0);
        assert!(((a[0] * a[0] + b[0] * b[0]).sqrt() - 0.5).abs() < 1e-15);
        let mut small = [0.1];
        clip_global_norm(&mut [&mut small], 0.5);
        assert_eq!(small[0], 0.1);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = [2.0];
        let mut s = OptimizerState::new(1);
        adamw_step(&mut p, &[0.0], &mut s, 1e-3, &AdamConfig::default());
        assert!((p[0] - 2.0 * (1.0 - 1e-3 * 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = [0.0];
        let mut s = OptimizerState::new(1);
        adamw_step(&mut p, &[3.0], &mut s, 0.01, &AdamConfig { weight_decay: 0.0, ..Default::default() });
        assert!((p[0] + 0.01).abs() < 1e-9);
    }
}
