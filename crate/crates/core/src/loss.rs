//! Scalar pieces of the diffusion-weighted denoising score-entropy objective.
//!
//! The differentiable version lives with the network; these functions are the
//! reference values it is checked against.

use serde::{Deserialize, Serialize};

use crate::chain::Trajectory;
use crate::error::{CoreError, Result};
use crate::seq::Token;

/// Which target the reverse model is fit to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Ratios of the logged last-step forward conditional.
    #[default]
    PathRatio,
    /// Cross-entropy to the coordinate's value before the step.
    PrevValueCe,
    /// Exact reverse conditional; enumerable toys only.
    ExactPosterior,
}

/// `K(a) = a(log a − 1)`, with `K(0) = 0`.
pub fn k_term(a: f64) -> Result<f64> {
    if !(a >= 0.0) || !a.is_finite() {
        return Err(CoreError::InvalidArgument(format!("K(a) needs finite a >= 0, got {a}")));
    }
    if a == 0.0 {
        return Ok(0.0);
    }
    Ok(a * (a.ln() - 1.0))
}

/// `s − r·log s + K(r)`; nonnegative with equality at `s = r`.
pub fn bregman_term(s: f64, r: f64) -> Result<f64> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(CoreError::InvalidArgument(format!("score must be positive, got {s}")));
    }
    if r == 0.0 {
        return Ok(s);
    }
    Ok(s - r * s.ln() + k_term(r)?)
}

/// `r(σ) = q(σ | x_{t,\k}) / q(x_{t,k} | x_{t,\k})` from the step-`t` log.
///
/// Both paths being compared share the realized prefix up to `t − 1`, so the
/// path-probability ratio reduces to the last-step conditional ratio.
pub fn path_ratio_targets(traj: &Trajectory, t: usize) -> Result<Vec<f64>> {
    let rec = traj
        .step(t)
        .ok_or(CoreError::StepOutOfRange { step: t, total: traj.t_end() })?;
    ratios_from_conditional(&rec.conditional, rec.value)
}

pub fn ratios_from_conditional(cond: &[f64], current: Token) -> Result<Vec<f64>> {
    let denom = cond[current as usize];
    if !(denom > 0.0) {
        return Err(CoreError::ZeroProbability { index: current as usize, token: current });
    }
    Ok(cond.iter().map(|&q| q / denom).collect())
}

/// Inputs to one snapshot's loss: the neighbor set is the `|Σ|−1`
/// substitutions at the scheduled coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLossInput {
    /// `x_{t,k_t}`.
    pub current: Token,
    /// Frozen forward conditional `q_T(·|x_{t,\k})`.
    pub frozen: Vec<f64>,
    /// Model distribution `r_θ(·|masked x_t, t)`.
    pub model: Vec<f64>,
    /// Target ratios `r(σ)`.
    pub targets: Vec<f64>,
}

/// Per-neighbor weights and constant such that the loss equals
/// `Σ_{σ≠x_k} [r_θ(σ) − w_σ·log r_θ(σ)] + c`.
///
/// `w_σ = q(σ)·r(σ)`, `c = Σ_{σ≠x_k} [w_σ·log q(σ) + q(σ)·K(r(σ))]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborWeights {
    pub current: Token,
    pub weights: Vec<f64>,
    pub constant: f64,
}

pub fn neighbor_weights(current: Token, frozen: &[f64], targets: &[f64]) -> Result<NeighborWeights> {
    if frozen.len() != targets.len() {
        return Err(CoreError::DimensionMismatch { expected: frozen.len(), actual: targets.len() });
    }
    let mut weights = vec![0.0; frozen.len()];
    let mut constant = 0.0;
    for (s, (&q, &r)) in frozen.iter().zip(targets).enumerate() {
        if s == current as usize {
            continue;
        }
        let w = q * r;
        weights[s] = w;
        if w > 0.0 {
            constant += w * q.ln();
        }
        constant += q * k_term(r)?;
    }
    Ok(NeighborWeights { current, weights, constant })
}

/// `Σ_{σ≠x_k} [ r_θ(σ) − q(σ)·r(σ)·log(r_θ(σ)/q(σ)) + q(σ)·K(r(σ)) ]`.
pub fn step_loss(input: &StepLossInput) -> Result<f64> {
    let n = input.frozen.len();
    if input.model.len() != n || input.targets.len() != n {
        return Err(CoreError::DimensionMismatch { expected: n, actual: input.model.len().min(input.targets.len()) });
    }
    let mut total = 0.0;
    for s in 0..n {
        if s == input.current as usize {
            continue;
        }
        let (q, rm, r) = (input.frozen[s], input.model[s], input.targets[s]);
        let w = q * r;
        if w > 0.0 {
            if !(rm > 0.0) {
                return Err(CoreError::ZeroProbability { index: s, token: s as Token });
            }
            total += rm - w * (rm / q).ln() + q * k_term(r)?;
        } else {
            total += rm + q * k_term(r)?;
        }
    }
    Ok(total)
}

/// Snapshot times `i·⌊t/m⌋` for `i = 1..m`, or every step `1..=t` when `t < m`.
pub fn snapshot_times(t: usize, per_sample: usize) -> Vec<usize> {
    if t == 0 || per_sample == 0 {
        return Vec::new();
    }
    if t < per_sample {
        return (1..=t).collect();
    }
    let stride = t / per_sample;
    (1..=per_sample).map(|i| i * stride).collect()
}
