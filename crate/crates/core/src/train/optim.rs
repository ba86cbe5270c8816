//! Learning-rate schedule and AdamW.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Linear warmup from 0 to `max_lr`, then linear decay to 0 at `total`.
/// Steps past `total` clamp to 0.
pub fn lr_at(step: usize, warmup: usize, total: usize, max_lr: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return max_lr * step as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    max_lr * (total - step) as f64 / span
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &[Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<T: Scalar>(grads: &[Vec<T>]) -> f64 {
    grads.iter().flatten().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt()
}

/// Scales the gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g = T::from_f64(g.as_f64() * s));
    }
    norm
}

impl AdamW {
    /// One update with decoupled weight decay: `w -= lr * wd * w`, then the
    /// bias-corrected adaptive step.
    pub fn step<T: Scalar>(&self, params: &mut [Tensor<T>], grads: &[Vec<T>], state: &mut AdamState, lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::shape("adamw", &[params.len()], &[grads.len(), state.m.len()]));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(j) = g.iter().position(|x| !x.as_f64().is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {i} at coordinate {j} (step {})", state.step + 1)));
            }
            if g.len() != params[i].numel() || state.m[i].len() != g.len() {
                return Err(Error::shape("adamw gradient", params[i].shape(), &[g.len()]));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j].as_f64();
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mut x = w.as_f64();
                x -= lr * self.weight_decay * x;
                x -= lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                *w = T::from_f64(x);
            }
        }
        Ok(())
    }
}
