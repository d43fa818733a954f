//! Fixed per-round permutations and the global step → coordinate map.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng;

/// `N` permutations of the `L` positions, fixed up front.
///
/// Positions are 0-based; global steps `t` run over `1..=N·L` with `t = 0`
/// denoting the clean state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateSchedule {
    len: usize,
    perms: Vec<Vec<usize>>,
    seed: u64,
}

impl UpdateSchedule {
    /// Draws `rounds` independent uniform permutations from the seeded stream.
    pub fn build(len: usize, rounds: usize, seed: u64) -> Result<Self> {
        if len == 0 || rounds == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "schedule needs L >= 1 and N >= 1, got L={len}, N={rounds}"
            )));
        }
        let mut rng = rng::stream(seed, 0x5C4E_D01E);
        let perms = (0..rounds)
            .map(|_| {
                let mut p: Vec<usize> = (0..len).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        Ok(Self { len, perms, seed })
    }

    /// Builds a schedule from explicit permutations.
    pub fn from_perms(perms: Vec<Vec<usize>>) -> Result<Self> {
        let len = perms.first().map(Vec::len).unwrap_or(0);
        if len == 0 {
            return Err(CoreError::InvalidArgument("empty schedule".into()));
        }
        for p in &perms {
            let mut seen = vec![false; len];
            if p.len() != len || p.iter().any(|&i| i >= len || std::mem::replace(&mut seen[i], true)) {
                return Err(CoreError::InvalidArgument(format!("not a permutation of 0..{len}: {p:?}")));
            }
        }
        Ok(Self { len, perms, seed: 0 })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn rounds(&self) -> usize {
        self.perms.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn perms(&self) -> &[Vec<usize>] {
        &self.perms
    }

    /// Total number of steps `T = N·L`.
    pub fn total_steps(&self) -> usize {
        self.len * self.perms.len()
    }

    /// `k_t = π_r(j)` with `r = ⌈t/L⌉`, `j = ((t−1) mod L) + 1`.
    pub fn coordinate_at(&self, t: usize) -> Result<usize> {
        let total = self.total_steps();
        if t == 0 || t > total {
            return Err(CoreError::StepOutOfRange { step: t, total });
        }
        let round = (t - 1) / self.len;
        let j = (t - 1) % self.len;
        Ok(self.perms[round][j])
    }

    /// Global step for round `n` (1-based) and in-round position `i` (1-based):
    /// `t = (n−1)·L + i`.
    pub fn global_step(&self, round: usize, i: usize) -> usize {
        (round - 1) * self.len + i
    }

    /// Coordinates visited by the forward chain, in order `t = 1..=T`.
    pub fn forward_order(&self) -> Vec<usize> {
        self.perms.iter().flatten().copied().collect()
    }
}
