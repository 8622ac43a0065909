//! Adam and the linear-warmup / cosine-annealing learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments for a flattened parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        AdamState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn for_params<P: ParamSet>(params: &P) -> Self {
        Self::new(params.num_params())
    }
}

/// One bias-corrected Adam update of `params` with `grads`.
pub fn adam_step<P: ParamSet>(state: &mut AdamState, params: &mut P, grads: &P, lr: f64) -> Result<()> {
    let g = grads.flat();
    if g.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient has {} entries, optimizer tracks {}",
            g.len(),
            state.m.len()
        )));
    }
    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);
    for ((m, v), gi) in state.m.iter_mut().zip(state.v.iter_mut()).zip(&g) {
        *m = BETA1 * *m + (1.0 - BETA1) * gi;
        *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
    }
    let mut offset = 0;
    let (m, v) = (&state.m, &state.v);
    params.visit_mut(&mut |_, values| {
        for (k, theta) in values.iter_mut().enumerate() {
            let m_hat = m[offset + k] / bc1;
            let v_hat = v[offset + k] / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        offset += values.len();
    });
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            warmup_epochs: 10,
            total_epochs: 100,
            peak_lr: 2.375e-4,
            floor_lr: 0.0,
        }
    }
}

/// Learning rate for a zero-based epoch. Warmup ramps linearly to the peak
/// at epoch `warmup - 1`; cosine annealing then reaches the floor exactly at
/// the last epoch.
pub fn lr_at(epoch: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::Bounds(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.total_epochs
        )));
    }
    if cfg.warmup_epochs > cfg.total_epochs {
        return Err(Error::InvalidArgument(
            "warmup longer than the whole schedule".into(),
        ));
    }
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.peak_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64);
    }
    let span = cfg.total_epochs - cfg.warmup_epochs - 1;
    let t = if span == 0 {
        0.0
    } else {
        (epoch - cfg.warmup_epochs) as f64 / span as f64
    };
    Ok(cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}
