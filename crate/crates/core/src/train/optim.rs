use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

fn check_shapes(what: &'static str, a: &[Tensor<f32>], b: &[Tensor<f32>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { what, expected: a.len(), found: b.len() });
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::InvalidArgument(format!(
                "{what}: shape {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
    }
    Ok(())
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut [Tensor<f32>], grads: &[Tensor<f32>], state: &mut AdamState, lr: f64) -> Result<()> {
    check_shapes("gradients", params, grads)?;
    if state.m.len() != params.len()
        || state.v.len() != params.len()
        || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
        || state.v.iter().zip(params.iter()).any(|(v, p)| v.len() != p.numel())
    {
        return Err(Error::InvalidArgument("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
    let step_size = (lr / c1) as f32;
    let inv_sqrt_c2 = (1.0 / c2.sqrt()) as f32;
    let eps = ADAM_EPS as f32;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= step_size * *m / ((*v).sqrt() * inv_sqrt_c2 + eps);
        }
    }
    Ok(())
}

/// `lr_max * 0.5 * (1 + cos(pi * step / total))`, zero past the end.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    lr_max * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos())
}

/// `ema <- decay * ema + (1 - decay) * weights`.
pub fn ema_update(ema: &mut [Tensor<f32>], weights: &[Tensor<f32>], decay: f64) -> Result<()> {
    check_shapes("ema weights", ema, weights)?;
    let d = decay as f32;
    for (e, w) in ema.iter_mut().zip(weights) {
        for (e, &w) in e.data_mut().iter_mut().zip(w.data()) {
            *e = d * *e + (1.0 - d) * w;
        }
    }
    Ok(())
}

/// Decay used after optimizer step `step` (0-based). With warm-up the
/// average starts short and lengthens, `min(decay, (1 + step) / (10 + step))`.
pub fn ema_decay_at(step: u64, decay: f64, warmup: bool) -> f64 {
    if warmup {
        decay.min((1.0 + step as f64) / (10.0 + step as f64))
    } else {
        decay
    }
}
