use serde::Serialize;

use crate::error::Result;
use crate::model::ConditionalModel;
use crate::oracle::distance::kl_divergence;
use crate::oracle::marginals::exact_marginals;
use crate::schedule::UpdateSchedule;
use crate::seq::{Token, TokenSeq};
use crate::tabular::TabularDistribution;

/// `p_prev(σ | x_{\k})`: the exact conditional a reverse step at `k` needs.
pub fn optimal_reverse_infill(p_prev: &TabularDistribution, x: &TokenSeq, k: usize) -> Result<Vec<f64>> {
    p_prev.conditional(x.tokens(), k)
}

/// Reverse infill implied by fitting the path-ratio targets exactly:
/// `∝ q_T(σ)·r(σ) ∝ q_T(σ)²`.
pub fn path_ratio_implied_infill(frozen: &[f64]) -> Vec<f64> {
    let z: f64 = frozen.iter().map(|q| q * q).sum();
    frozen.iter().map(|q| q * q / z).collect()
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GapRow {
    pub t: usize,
    pub coordinate: usize,
    /// `E_{x_t ∼ p_t} KL(optimal ‖ implied)`.
    pub kl: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TargetGapReport {
    pub rows: Vec<GapRow>,
}

impl TargetGapReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,coordinate,kl\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.12e}\n", r.t, r.coordinate, r.kl));
        }
        out
    }
}

/// Per-step gap between the path-ratio-implied reverse infill and the exact one.
pub fn target_gap_report(
    p0: &TabularDistribution,
    kernel: &dyn ConditionalModel,
    schedule: &UpdateSchedule,
) -> Result<TargetGapReport> {
    let total = schedule.total_steps();
    let marginals = exact_marginals(p0, kernel, schedule, total)?;
    let space = p0.space();
    let mut rows = Vec::with_capacity(total);
    let mut state = vec![0 as Token; space.len()];
    for t in 1..=total {
        let k = schedule.coordinate_at(t)?;
        let pt = &marginals[t];
        let mut gap = 0.0;
        for (idx, &mass) in pt.probs().iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            space.decode_into(idx, &mut state);
            let x = space.decode(idx);
            let optimal = marginals[t - 1].conditional(&state, k)?;
            let implied = path_ratio_implied_infill(&kernel.infill(&x, k, total)?);
            gap += mass * kl_divergence(&optimal, &implied)?;
        }
        rows.push(GapRow { t, coordinate: k, kl: gap });
    }
    Ok(TargetGapReport { rows })
}
