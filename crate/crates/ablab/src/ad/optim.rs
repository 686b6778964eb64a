//! AdamW with decoupled weight decay and global-norm gradient clipping, EMA
//! tracking of a parameter store, and the EMA-rate schedules.

use super::params::{EmaState, ParamStore};
use super::tensor::Tensor;
use super::AdError;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip threshold; None disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { b1: 0.9, b2: 0.999, eps: 1e-8, weight_decay: 0.05, clip_norm: Some(1.0) }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: HashMap<String, Tensor<f32>>,
    pub v: HashMap<String, Tensor<f32>>,
    pub t: u64,
}

pub fn global_grad_norm(grads: &[(String, Tensor<f32>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// One decoupled-weight-decay Adam step over all named gradients.
/// Clips by global norm first when configured. Rejects non-finite gradients.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[(String, Tensor<f32>)],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), AdError> {
    for (name, g) in grads {
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(AdError::NonFiniteGradient(name.clone()));
        }
    }
    let clip_scale = match cfg.clip_norm {
        Some(c) => {
            let norm = global_grad_norm(grads);
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.b1.powf(t);
    let bc2 = 1.0 - cfg.b2.powf(t);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| AdError::ParamMismatch(name.clone()))?;
        if p.shape != g.shape {
            return Err(AdError::ShapeMismatch { op: "adamw_step", lhs: p.shape.clone(), rhs: g.shape.clone() });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape.clone()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape.clone()));
        for i in 0..p.data.len() {
            let gi = g.data[i] as f64 * clip_scale;
            let mi = cfg.b1 * m.data[i] as f64 + (1.0 - cfg.b1) * gi;
            let vi = cfg.b2 * v.data[i] as f64 + (1.0 - cfg.b2) * gi * gi;
            m.data[i] = mi as f32;
            v.data[i] = vi as f32;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            let mut pv = p.data[i] as f64;
            pv -= lr * cfg.weight_decay * pv; // decoupled decay
            pv -= lr * mhat / (vhat.sqrt() + cfg.eps);
            p.data[i] = pv as f32;
        }
    }
    Ok(())
}

/// shadow <- (1 - tau) * shadow + tau * online, elementwise.
pub fn ema_update(ema: &mut EmaState, online: &ParamStore, tau: f64) -> Result<(), AdError> {
    let tau = tau as f32;
    for (name, shadow) in ema.params.iter_mut() {
        let src = online
            .get(name)
            .ok_or_else(|| AdError::ParamMismatch(name.to_string()))?;
        if src.shape != shadow.shape {
            return Err(AdError::ShapeMismatch { op: "ema_update", lhs: shadow.shape.clone(), rhs: src.shape.clone() });
        }
        for (s, &o) in shadow.data.iter_mut().zip(&src.data) {
            *s = (1.0 - tau) * *s + tau * o;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauKind {
    /// 0.004 * 0.5 * (1 + cos(pi * step / total)): decays 0.004 -> 0.
    Cosine,
    /// Constant 0.004.
    Constant,
}

pub const TAU_BASE: f64 = 0.004;

pub fn tau_schedule(kind: TauKind, step: u64, total: u64) -> f64 {
    match kind {
        TauKind::Constant => TAU_BASE,
        TauKind::Cosine => {
            let frac = if total == 0 { 1.0 } else { step as f64 / total as f64 };
            TAU_BASE * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

pub fn parse_tau_kind(s: &str) -> Result<TauKind, AdError> {
    match s {
        "cosine" => Ok(TauKind::Cosine),
        "constant" => Ok(TauKind::Constant),
        other => Err(AdError::UnknownSchedule(other.to_string())),
    }
}
