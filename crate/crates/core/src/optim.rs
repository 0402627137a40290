//! Sparse embedding updates with per-token scaling of gradient and decay.
//!
//! For a row `j` with scale `λ_j`, plain SGD performs
//!
//! ```text
//! θ_j ← (1 − α·β·λ_j)·θ_j − α·λ_j·∇_j
//! ```
//!
//! and AdamW feeds `λ_j·∇_j` into its moment estimates while applying the
//! decoupled decay `θ_j ← θ_j − α·β·λ_j·θ_j` before the adaptive step.
//! Only rows present in the gradient are touched, so `λ_j = 0` or an absent
//! row leaves the embedding bit-for-bit unchanged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bpe::TokenId;
use crate::embedding::{EmbeddingRows, EmbeddingTable};
use crate::encoder::RowGrads;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vocab::LambdaVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    AdamW,
}

/// Which terms of the update the per-token scale multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaScope {
    Both,
    Gradient,
    Decay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub lambda_scope: LambdaScope,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimKind::AdamW,
            lr_peak: 5e-5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_fraction: 0.1,
            total_steps: 1,
            lambda_scope: LambdaScope::Both,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_peak > 0.0) {
            return Err(Error::config("optim.lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optim.weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("optim.warmup_fraction", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optim.beta1", "betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).ceil() as u64
    }
}

/// Linear warm-up from 0 to the peak rate, then constant.
pub fn lr_at(step: u64, cfg: &OptimConfig) -> f64 {
    let warm = cfg.warmup_steps();
    if warm == 0 || step >= warm {
        cfg.lr_peak
    } else {
        cfg.lr_peak * step as f64 / warm as f64
    }
}

/// Adaptive moments for the rows touched so far, plus the global step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimState<T: Scalar> {
    moments: BTreeMap<TokenId, (Vec<T>, Vec<T>)>,
    step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new() -> Self {
        OptimState {
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tracked_rows(&self) -> usize {
        self.moments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.step == 0 && self.moments.is_empty()
    }
}

pub fn reset_state<T: Scalar>(state: &mut OptimState<T>) {
    *state = OptimState::new();
}

/// Apply one update. Returns the learning rate that was used.
pub fn step<T: Scalar>(
    table: &mut EmbeddingTable<T>,
    grads: &RowGrads,
    lambda: &LambdaVector,
    cfg: &OptimConfig,
    state: &mut OptimState<T>,
) -> Result<f64> {
    for (id, g) in grads.iter() {
        if id as usize >= table.row_count() {
            return Err(Error::InvalidId {
                id,
                len: table.row_count(),
            });
        }
        if g.len() != table.dim() {
            return Err(Error::DimensionMismatch(format!(
                "gradient row {id} has length {}, table dim is {}",
                g.len(),
                table.dim()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in row {id}")));
        }
        if lambda.get(id).is_none() {
            return Err(Error::Consistency(format!("no lambda for row {id}")));
        }
    }

    state.step += 1;
    let t = state.step;
    let lr_f = lr_at(t, cfg);
    let lr = T::of(lr_f);
    let wd = T::of(cfg.weight_decay);

    for (id, g) in grads.iter() {
        let lam = T::of(lambda.get(id).expect("checked above"));
        let (lam_g, lam_d) = match cfg.lambda_scope {
            LambdaScope::Both => (lam, lam),
            LambdaScope::Gradient => (lam, T::one()),
            LambdaScope::Decay => (T::one(), lam),
        };
        let mut row = table.row_mut(id);
        match cfg.kind {
            OptimKind::Sgd => {
                let keep = T::one() - lr * wd * lam_d;
                for (theta, &gv) in row.iter_mut().zip(g) {
                    *theta = keep * *theta - lr * (lam_g * T::of(gv));
                }
            }
            OptimKind::AdamW => {
                let (b1, b2, eps) = (T::of(cfg.beta1), T::of(cfg.beta2), T::of(cfg.eps));
                let bc1 = T::one() - b1.powi(t as i32);
                let bc2 = T::one() - b2.powi(t as i32);
                let dim = g.len();
                let (m, v) = state
                    .moments
                    .entry(id)
                    .or_insert_with(|| (vec![T::zero(); dim], vec![T::zero(); dim]));
                let decay = lr * wd * lam_d;
                for (c, theta) in row.iter_mut().enumerate() {
                    let gs = lam_g * T::of(g[c]);
                    *theta = *theta - decay * *theta;
                    m[c] = b1 * m[c] + (T::one() - b1) * gs;
                    v[c] = b2 * v[c] + (T::one() - b2) * gs * gs;
                    let m_hat = m[c] / bc1;
                    let v_hat = v[c] / bc2;
                    *theta -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("row {id} became non-finite")));
        }
    }
    Ok(lr_f)
}
