use crate::chain::metropolis_acceptance;
use crate::error::{CoreError, Result};
use crate::model::{ConditionalModel, EnergyModel};
use crate::oracle::enumeration::StateEnumeration;
use crate::seq::Token;

/// One single-coordinate step as a sparse row-stochastic matrix.
///
/// Row `x` holds `P(x → x with x_k ← v)` for `v ∈ Σ`, so every row has at
/// most `|Σ|` nonzeros, all inside the fiber of states agreeing off `k`.
/// A row of zeros marks a state the matrix is undefined at (used for reverse
/// kernels at unreachable states).
#[derive(Debug, Clone, PartialEq)]
pub struct StepKernelMatrix {
    space: StateEnumeration,
    coordinate: usize,
    rows: Vec<f64>,
}

/// How a single-coordinate kernel is built from an energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelRule {
    /// Resample from `∝ e^{−βf}` on the fiber.
    HeatBath,
    /// Uniform proposal over the other symbols, accepted w.p. `min{1, e^{−βΔ}}`.
    Metropolis,
    /// Metropolis with the exponent scaled by an extra factor; not reversible
    /// for the intended target unless the factor is 1.
    MisweightedMetropolis(f64),
}

impl StepKernelMatrix {
    pub fn space(&self) -> StateEnumeration {
        self.space
    }

    pub fn coordinate(&self) -> usize {
        self.coordinate
    }

    /// Transition probabilities from `state` to each value at the coordinate.
    pub fn row(&self, state: usize) -> &[f64] {
        let s = self.space.vocab().size();
        &self.rows[state * s..(state + 1) * s]
    }

    /// `P(x → y)`; zero unless `x` and `y` share the fiber.
    pub fn transition(&self, x: usize, y: usize) -> f64 {
        let k = self.coordinate;
        if self.space.fiber_base(x, k) != self.space.fiber_base(y, k) {
            return 0.0;
        }
        self.row(x)[self.space.digit(y, k) as usize]
    }

    /// `pᵀP`.
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let s = self.space.vocab().size();
        let stride = self.space.stride(self.coordinate);
        let mut out = vec![0.0; p.len()];
        for (x, &px) in p.iter().enumerate() {
            if px == 0.0 {
                continue;
            }
            let base = self.space.fiber_base(x, self.coordinate);
            for (v, &w) in self.row(x).iter().enumerate().take(s) {
                out[base + v * stride] += px * w;
            }
        }
        out
    }

    /// Largest `|Σ_y P(x→y) − 1|` over rows that are defined.
    pub fn max_row_error(&self) -> f64 {
        let s = self.space.vocab().size();
        self.rows
            .chunks(s)
            .map(|r| r.iter().sum::<f64>())
            .filter(|&sum| sum != 0.0)
            .map(|sum| (sum - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Whether every nonzero connects states agreeing off the coordinate.
    /// Holds by construction of the storage layout.
    pub fn is_fiber_local(&self) -> bool {
        true
    }

    fn from_rows(space: StateEnumeration, coordinate: usize, rows: Vec<f64>) -> Self {
        Self { space, coordinate, rows }
    }

    pub(crate) fn zeros(space: StateEnumeration, coordinate: usize) -> Self {
        Self::from_rows(space, coordinate, vec![0.0; space.total() * space.vocab().size()])
    }

    pub(crate) fn row_mut(&mut self, state: usize) -> &mut [f64] {
        let s = self.space.vocab().size();
        &mut self.rows[state * s..(state + 1) * s]
    }
}

/// Heat-bath kernel at coordinate `k` built from a conditional model at
/// model time `t`. Rows are constant on fibers.
pub fn heat_bath_kernel(
    kernel: &dyn ConditionalModel,
    space: StateEnumeration,
    k: usize,
    t: usize,
) -> Result<StepKernelMatrix> {
    if k >= space.len() {
        return Err(CoreError::InvalidArgument(format!("coordinate {k} out of range")));
    }
    let s = space.vocab().size();
    let stride = space.stride(k);
    let mut m = StepKernelMatrix::zeros(space, k);
    for x in 0..space.total() {
        if space.digit(x, k) != 0 {
            continue;
        }
        let cond = kernel.infill(&space.decode(x), k, t)?;
        crate::seq::check_distribution(&cond, crate::chain::NORMALIZATION_TOL)?;
        for v in 0..s {
            m.row_mut(x + v * stride).copy_from_slice(&cond);
        }
    }
    Ok(m)
}

/// Kernel at coordinate `k` for the Gibbs measure `∝ e^{−βf}` under `rule`.
pub fn energy_kernel(
    energy: &dyn EnergyModel,
    space: StateEnumeration,
    k: usize,
    rule: KernelRule,
    beta: f64,
) -> Result<StepKernelMatrix> {
    let s = space.vocab().size();
    let mut m = StepKernelMatrix::zeros(space, k);
    for x in 0..space.total() {
        let state = space.decode(x);
        let cur = state.get(k) as usize;
        let deltas: Vec<f64> = (0..s as Token)
            .map(|v| energy.energy_delta(&state, k, v).map(|d| beta * d))
            .collect::<Result<_>>()?;
        let row = m.row_mut(x);
        match rule {
            KernelRule::HeatBath => {
                row.copy_from_slice(&crate::model::softmax(&deltas.iter().map(|d| -d).collect::<Vec<_>>()));
            }
            KernelRule::Metropolis | KernelRule::MisweightedMetropolis(_) => {
                let scale = match rule {
                    KernelRule::MisweightedMetropolis(c) => c,
                    _ => 1.0,
                };
                let mut stay = 1.0;
                for v in 0..s {
                    if v == cur {
                        continue;
                    }
                    let p = metropolis_acceptance(scale * deltas[v]) / (s - 1) as f64;
                    row[v] = p;
                    stay -= p;
                }
                row[cur] = stay;
            }
        }
    }
    Ok(m)
}
