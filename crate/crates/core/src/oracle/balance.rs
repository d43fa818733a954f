use crate::error::Result;
use crate::model::EnergyModel;
use crate::oracle::enumeration::StateEnumeration;
use crate::oracle::kernel::{energy_kernel, KernelRule, StepKernelMatrix};

/// `π ∝ e^{−βf}` over the whole space.
pub fn gibbs_measure(energy: &dyn EnergyModel, space: StateEnumeration, beta: f64) -> Result<Vec<f64>> {
    let energies: Vec<f64> = (0..space.total())
        .map(|i| energy.energy(&space.decode(i)).map(|e| -beta * e))
        .collect::<Result<_>>()?;
    Ok(crate::model::softmax(&energies))
}

/// `max_{x,y} |π(x)P(x→y) − π(y)P(y→x)|` over every coordinate's kernel.
pub fn detailed_balance_residual(
    energy: &dyn EnergyModel,
    len: usize,
    rule: KernelRule,
    beta: f64,
) -> Result<f64> {
    let space = StateEnumeration::new(len, energy.vocab())?;
    let pi = gibbs_measure(energy, space, beta)?;
    let mut worst: f64 = 0.0;
    for k in 0..len {
        let m = energy_kernel(energy, space, k, rule, beta)?;
        worst = worst.max(kernel_balance_residual(&m, &pi));
    }
    Ok(worst)
}

pub fn kernel_balance_residual(m: &StepKernelMatrix, pi: &[f64]) -> f64 {
    let space = m.space();
    let k = m.coordinate();
    let stride = space.stride(k);
    let mut worst: f64 = 0.0;
    for x in 0..space.total() {
        let base = space.fiber_base(x, k);
        for v in 0..space.vocab().size() {
            let y = base + v * stride;
            worst = worst.max((pi[x] * m.transition(x, y) - pi[y] * m.transition(y, x)).abs());
        }
    }
    worst
}

/// `‖pᵀP − pᵀ‖₁`.
pub fn stationarity_residual(p: &[f64], m: &StepKernelMatrix) -> f64 {
    m.apply(p).iter().zip(p).map(|(a, b)| (a - b).abs()).sum()
}
