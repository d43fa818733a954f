use crate::error::{CoreError, Result};
use crate::model::ConditionalModel;
use crate::oracle::kernel::{heat_bath_kernel, StepKernelMatrix};
use crate::schedule::UpdateSchedule;
use crate::tabular::TabularDistribution;

/// Forward step kernels `P_1..P_{t_end}` for the scheduled heat-bath chain,
/// evaluated at model time `T`.
pub fn forward_kernels(
    space_of: &TabularDistribution,
    kernel: &dyn ConditionalModel,
    schedule: &UpdateSchedule,
    t_end: usize,
) -> Result<Vec<StepKernelMatrix>> {
    let total = schedule.total_steps();
    if t_end > total {
        return Err(CoreError::StepOutOfRange { step: t_end, total });
    }
    // kernels only depend on the coordinate, so build one per position
    let mut by_coord: Vec<Option<StepKernelMatrix>> = vec![None; schedule.len()];
    (1..=t_end)
        .map(|t| {
            let k = schedule.coordinate_at(t)?;
            if by_coord[k].is_none() {
                by_coord[k] = Some(heat_bath_kernel(kernel, space_of.space(), k, total)?);
            }
            Ok(by_coord[k].clone().expect("built above"))
        })
        .collect()
}

/// `p_0..p_{t_end}` with `p_t = p_{t−1}·P_t`.
pub fn exact_marginals(
    p0: &TabularDistribution,
    kernel: &dyn ConditionalModel,
    schedule: &UpdateSchedule,
    t_end: usize,
) -> Result<Vec<TabularDistribution>> {
    if p0.len() != schedule.len() {
        return Err(CoreError::DimensionMismatch { expected: schedule.len(), actual: p0.len() });
    }
    let kernels = forward_kernels(p0, kernel, schedule, t_end)?;
    Ok(propagate(p0, &kernels))
}

pub fn propagate(p0: &TabularDistribution, kernels: &[StepKernelMatrix]) -> Vec<TabularDistribution> {
    let mut out = Vec::with_capacity(kernels.len() + 1);
    out.push(p0.clone());
    for k in kernels {
        let next = k.apply(out.last().expect("non-empty").probs());
        out.push(TabularDistribution::from_raw(p0.space(), next));
    }
    out
}

/// Reverse of one forward step: from state `z`, `R(z → y) ∝ p_prev(y)·P(y → z)`
/// over `z`'s fiber. Rows at states with `p_t(z) = 0` are left undefined (zero).
pub fn exact_reverse_kernel(p_prev: &TabularDistribution, forward: &StepKernelMatrix) -> StepKernelMatrix {
    let space = forward.space();
    let k = forward.coordinate();
    let s = space.vocab().size();
    let stride = space.stride(k);
    let mut rev = StepKernelMatrix::zeros(space, k);
    for z in 0..space.total() {
        let base = space.fiber_base(z, k);
        let zk = space.digit(z, k) as usize;
        let weights: Vec<f64> = (0..s)
            .map(|v| {
                let y = base + v * stride;
                p_prev.probs()[y] * forward.row(y)[zk]
            })
            .collect();
        let norm: f64 = weights.iter().sum();
        if norm > 0.0 {
            rev.row_mut(z).iter_mut().zip(&weights).for_each(|(r, w)| *r = w / norm);
        }
    }
    rev
}

/// Reverse row at a single state; errors when the state has zero mass.
pub fn reverse_row(rev: &StepKernelMatrix, state: usize) -> Result<&[f64]> {
    let row = rev.row(state);
    if row.iter().all(|&v| v == 0.0) {
        return Err(CoreError::NullEvent);
    }
    Ok(row)
}

/// Applies reverse kernels from `p_T` back to time 0.
pub fn reverse_compose(marginals: &[TabularDistribution], forward: &[StepKernelMatrix]) -> TabularDistribution {
    let space = marginals[0].space();
    let mut p = marginals.last().expect("non-empty").probs().to_vec();
    for t in (1..marginals.len()).rev() {
        let rev = exact_reverse_kernel(&marginals[t - 1], &forward[t - 1]);
        p = rev.apply(&p);
    }
    TabularDistribution::from_raw(space, p)
}
