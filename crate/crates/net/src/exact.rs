//! Exact reverse conditionals on enumerable toys, for the reference sampler
//! and the posterior training target.

use glauber_core::oracle::{forward_kernels, propagate};
use glauber_core::{ConditionalModel, TabularDistribution, Token, UpdateSchedule};

use crate::error::{NetError, Result};

/// Marginals `p_0..p_T` of the scheduled chain with `frozen` coordinates
/// never updated (their steps act as the identity).
#[derive(Debug, Clone)]
pub struct ExactReverse {
    marginals: Vec<TabularDistribution>,
    schedule: UpdateSchedule,
}

impl ExactReverse {
    pub fn new(p0: &TabularDistribution, kernel: &dyn ConditionalModel, schedule: &UpdateSchedule, frozen: &[usize]) -> Result<Self> {
        if p0.len() != schedule.len() {
            return Err(NetError::Input(format!("p0 has length {}, schedule {}", p0.len(), schedule.len())));
        }
        let total = schedule.total_steps();
        let kernels = forward_kernels(p0, kernel, schedule, total)?;
        let mut marginals = vec![p0.clone()];
        for (i, k) in kernels.iter().enumerate() {
            let prev = marginals.last().expect("non-empty").clone();
            let next = if frozen.contains(&schedule.coordinate_at(i + 1)?) {
                prev
            } else {
                propagate(&prev, std::slice::from_ref(k)).pop().expect("one step")
            };
            marginals.push(next);
        }
        Ok(Self { marginals, schedule: schedule.clone() })
    }

    pub fn schedule(&self) -> &UpdateSchedule {
        &self.schedule
    }

    pub fn marginal(&self, t: usize) -> Option<&TabularDistribution> {
        self.marginals.get(t)
    }

    pub fn t_max(&self) -> usize {
        self.marginals.len() - 1
    }

    /// `p_{t−1}(x_k = · | x off k and off hidden)`.
    pub fn reverse_conditional(&self, x: &[Token], k: usize, t: usize, hidden: &[usize]) -> Result<Vec<f64>> {
        if t == 0 || t > self.t_max() {
            return Err(NetError::Input(format!("reverse step {t} outside 1..={}", self.t_max())));
        }
        Ok(self.marginals[t - 1].conditional_given(x, k, hidden)?)
    }

    /// Next-token law of `p_T` given the tokens at `known` positions.
    pub fn causal_next(&self, x: &[Token], m: usize, known: &[usize]) -> Result<Vec<f64>> {
        let hidden: Vec<usize> = (0..x.len()).filter(|j| *j != m && !known.contains(j)).collect();
        Ok(self.marginals[self.t_max()].conditional_given(x, m, &hidden)?)
    }
}
