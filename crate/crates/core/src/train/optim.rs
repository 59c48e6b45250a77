use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Whether weight decay applies to each tensor.
    pub decay: Vec<bool>,
}

impl AdamState {
    pub fn new(params: &[Tensor], decay: Vec<bool>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
            decay,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε)`.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.m.len()
        || params.len() != state.decay.len()
    {
        return Err(Error::shape("adamw_step", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for i in 0..params.len() {
        let wd = if state.decay[i] {
            lr * weight_decay
        } else {
            0.0
        };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let p = params[i].data_mut();
        for (((p, g), m), v) in p
            .iter_mut()
            .zip(grads[i].data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
            *p -= wd * *p + lr * update;
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn cosine_schedule(step: usize, warmup_steps: usize, total_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        assert_eq!(cosine_schedule(10, 10, 110, 1.0), 1.0);
        assert!(cosine_schedule(110, 10, 110, 1.0).abs() < 1e-15);
        assert!((cosine_schedule(60, 10, 110, 1.0) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_schedule(5, 10, 110, 2.0), 1.0);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![Tensor::filled(2, 2, 0.3)];
        let before = p.clone();
        let mut s = AdamState::new(&p, vec![true]);
        adamw_step(&mut p, &[Tensor::zeros(2, 2)], &mut s, 0.1, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::filled(1, 4, 3.0)];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 6.0);
        assert!((g[0].norm() - 1.0).abs() < 1e-12);
    }
}
