//! AdamW with decoupled weight decay, the warmup-cosine schedule and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One AdamW update at learning rate `lr`:
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
pub fn adamw_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState, cfg: &AdamWConfig, lr: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::invalid("adamw_step", format!("learning rate {lr} must be >= 0")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(
            "adamw_step",
            format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), state.m.len()),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            pd[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * pd[i]);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `lr_max`, then cosine decay to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, lr_max: f64, lr_min: f64) -> f64 {
    if step < warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr_max;
    }
    let t = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    lr_min + (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::full(&[1], v)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![scalar(0.0)];
        let mut st = OptimizerState::new(&p);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut p, &[scalar(1.0)], &mut st, &cfg, 0.1).unwrap();
        assert!((p[0].data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let mut p = vec![scalar(0.7)];
        let mut st = OptimizerState::new(&p);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        for _ in 0..3 {
            adamw_step(&mut p, &[scalar(0.0)], &mut st, &cfg, 0.1).unwrap();
        }
        assert_eq!(p[0].data()[0], 0.7);
    }

    #[test]
    fn schedule_landmarks() {
        assert_eq!(cosine_lr(10, 110, 10, 1.0, 0.1), 1.0);
        assert!((cosine_lr(110, 110, 10, 1.0, 0.1) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(60, 110, 10, 1.0, 0.1) - 0.55).abs() < 1e-15);
        assert_eq!(cosine_lr(0, 110, 10, 1.0, 0.1), 0.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::full(&[2], 3.0), Tensor::full(&[1], 4.0)];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 34f64.sqrt()).abs() < 1e-12);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }
}
