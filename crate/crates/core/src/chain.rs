//! Forward Glauber dynamics: single-coordinate heat-bath and Metropolis steps
//! and scheduled trajectories with per-step probability logging.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::model::ConditionalModel;
use crate::rng::{sample_index, StreamRng};
use crate::schedule::UpdateSchedule;
use crate::seq::{check_distribution, Token, TokenSeq, Vocabulary};

/// Tolerance for treating a logged conditional as normalized.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Resamples `x[k]` from `cond`. Returns the new state and `cond[new value]`.
pub fn heat_bath_step<R: Rng + ?Sized>(
    x: &TokenSeq,
    k: usize,
    cond: &[f64],
    rng: &mut R,
) -> Result<(TokenSeq, f64)> {
    check_distribution(cond, NORMALIZATION_TOL)?;
    if k >= x.len() {
        return Err(CoreError::InvalidArgument(format!("position {k} out of range")));
    }
    let v = sample_index(cond, rng);
    Ok((x.with(k, v as Token), cond[v]))
}

/// Metropolis move at `k`: propose `σ` uniformly from `Σ \ {x_k}` and accept
/// with probability `min{1, e^{−Δ}}` where `Δ = delta(x, k, σ)`.
///
/// Returns the (possibly unchanged) state and the acceptance probability of
/// the proposal that was drawn.
pub fn metropolis_step<R, D>(
    x: &TokenSeq,
    k: usize,
    vocab: Vocabulary,
    mut delta: D,
    rng: &mut R,
) -> Result<(TokenSeq, f64)>
where
    R: Rng + ?Sized,
    D: FnMut(&TokenSeq, usize, Token) -> Result<f64>,
{
    let s = vocab.size() as Token;
    let current = x.get(k);
    // uniform over the s-1 other symbols
    let mut proposal = rng.gen_range(0..s - 1);
    if proposal >= current {
        proposal += 1;
    }
    let d = delta(x, k, proposal)?;
    if !d.is_finite() {
        return Err(CoreError::NonFiniteEnergy(d));
    }
    let accept = metropolis_acceptance(d);
    if rng.gen::<f64>() < accept {
        Ok((x.with(k, proposal), accept))
    } else {
        Ok((x.clone(), accept))
    }
}

/// `min{1, e^{−Δ}}`.
pub fn metropolis_acceptance(delta: f64) -> f64 {
    if delta <= 0.0 {
        1.0
    } else {
        (-delta).exp()
    }
}

/// One executed forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub coordinate: usize,
    /// Full forward conditional `q(·|x_{\k})` used at this step.
    pub conditional: Vec<f64>,
    /// Value of the coordinate before the step.
    pub prev_value: Token,
    /// Sampled value.
    pub value: Token,
    /// `log Π_{s ≤ t} q_s(x_{s,k_s})`, the realized path log-probability.
    pub path_log_prob: f64,
}

/// A realized forward chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x0: TokenSeq,
    pub snapshots: BTreeMap<usize, TokenSeq>,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    fn start(x0: TokenSeq, snapshot_times: &[usize]) -> Self {
        let mut snapshots = BTreeMap::new();
        if snapshot_times.contains(&0) {
            snapshots.insert(0, x0.clone());
        }
        Self { x0, snapshots, steps: Vec::new() }
    }

    /// Last executed step.
    pub fn t_end(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, t: usize) -> Option<&StepRecord> {
        t.checked_sub(1).and_then(|i| self.steps.get(i))
    }

    /// Reconstructs `x_t` from the start state and the step log.
    pub fn state_at(&self, t: usize) -> Result<TokenSeq> {
        if t > self.t_end() {
            return Err(CoreError::StepOutOfRange { step: t, total: self.t_end() });
        }
        if let Some(x) = self.snapshots.get(&t) {
            return Ok(x.clone());
        }
        let mut x = self.x0.clone();
        for rec in &self.steps[..t] {
            x.set(rec.coordinate, rec.value);
        }
        Ok(x)
    }

    pub fn final_state(&self) -> TokenSeq {
        self.state_at(self.t_end()).expect("t_end is in range")
    }
}

/// Runs heat-bath steps `1..=t_end` using the kernel's infill conditional at
/// model time `T` (the schedule's total step count).
pub fn run_forward(
    x0: &TokenSeq,
    t_end: usize,
    kernel: &dyn ConditionalModel,
    schedule: &UpdateSchedule,
    rng: &mut StreamRng,
    snapshot_times: &[usize],
) -> Result<Trajectory> {
    let mut out = run_forward_batch(std::slice::from_ref(x0), t_end, kernel, schedule, std::slice::from_mut(rng), snapshot_times)?;
    Ok(out.pop().expect("one trajectory"))
}

/// Lockstep version of [`run_forward`]: trajectory `b` draws only from
/// `rngs[b]`, so the result equals running each one alone.
pub fn run_forward_batch(
    x0s: &[TokenSeq],
    t_end: usize,
    kernel: &dyn ConditionalModel,
    schedule: &UpdateSchedule,
    rngs: &mut [StreamRng],
    snapshot_times: &[usize],
) -> Result<Vec<Trajectory>> {
    let total = schedule.total_steps();
    if t_end > total {
        return Err(CoreError::StepOutOfRange { step: t_end, total });
    }
    if x0s.len() != rngs.len() {
        return Err(CoreError::DimensionMismatch { expected: x0s.len(), actual: rngs.len() });
    }
    if let Some(&bad) = snapshot_times.iter().find(|&&s| s > t_end) {
        return Err(CoreError::StepOutOfRange { step: bad, total: t_end });
    }
    for x in x0s {
        if x.len() != schedule.len() {
            return Err(CoreError::DimensionMismatch { expected: schedule.len(), actual: x.len() });
        }
    }
    let mut trajs: Vec<Trajectory> = x0s.iter().map(|x| Trajectory::start(x.clone(), snapshot_times)).collect();
    let mut states: Vec<TokenSeq> = x0s.to_vec();
    let mut log_probs = vec![0.0; x0s.len()];
    for t in 1..=t_end {
        let k = schedule.coordinate_at(t)?;
        let conds = kernel
            .infill_batch(&states, k, total)
            .map_err(|e| CoreError::KernelFailure { step: t, source: Box::new(e) })?;
        for (b, cond) in conds.into_iter().enumerate() {
            let prev_value = states[b].get(k);
            let (next, p) = heat_bath_step(&states[b], k, &cond, &mut rngs[b])
                .map_err(|e| CoreError::KernelFailure { step: t, source: Box::new(e) })?;
            log_probs[b] += p.ln();
            trajs[b].steps.push(StepRecord {
                t,
                coordinate: k,
                prev_value,
                value: next.get(k),
                conditional: cond,
                path_log_prob: log_probs[b],
            });
            states[b] = next;
            if snapshot_times.contains(&t) {
                trajs[b].snapshots.insert(t, states[b].clone());
            }
        }
    }
    Ok(trajs)
}
