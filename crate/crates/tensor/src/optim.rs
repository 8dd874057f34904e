//! Adam with global-norm clipping, plus learning-rate schedules.

use crate::{Gradients, ParamStore, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: Some(1.0) }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self { v: m.clone(), m, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.v[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Global norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One Adam update. Parameters without a gradient are treated as having a zero gradient.
///
/// A non-finite gradient leaves parameters and state untouched and returns an error.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<StepReport> {
    if state.m.len() != store.len() {
        return Err(TensorError::shape(
            "adam_step",
            format!("state holds {} moments for {} parameters", state.m.len(), store.len()),
        ));
    }
    for (id, g) in grads.iter() {
        if g.shape() != store.get(id).shape() {
            return Err(TensorError::shape(
                "adam_step",
                format!("gradient {:?} for parameter {:?}", g.shape(), store.get(id).shape()),
            ));
        }
        if !g.is_finite() {
            return Err(TensorError::NonFiniteGradient(store.name(id).to_string()));
        }
    }
    let norm = grads.global_norm();
    let scale = match cfg.grad_clip {
        Some(max) if norm > max => max / norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for id in store.ids().collect::<Vec<_>>() {
        let i = id.index();
        let g = grads.get(id);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = store.get_mut(id).data_mut();
        for j in 0..p.len() {
            let gj = g.map_or(0.0, |g| g.data()[j] as f64 * scale);
            let mj = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = cfg.lr * (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
            p[j] = (p[j] as f64 - update) as f32;
        }
    }
    Ok(StepReport { grad_norm: norm, clipped: scale < 1.0 })
}

/// Cosine decay from `base` to `base * final_fraction` over `total` steps, after a linear warmup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub total: usize,
    pub warmup: usize,
    pub final_fraction: f64,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        let floor = self.base * self.final_fraction;
        floor + (self.base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
