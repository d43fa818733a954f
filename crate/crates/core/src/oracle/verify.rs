//! The residual and round-trip suite behind the `oracle-verify` command.

use serde::Serialize;

use crate::error::Result;
use crate::energy::PottsEnergy;
use crate::oracle::balance::{detailed_balance_residual, stationarity_residual};
use crate::oracle::distance::tv_distance;
use crate::oracle::kernel::{heat_bath_kernel, KernelRule};
use crate::oracle::marginals::{forward_kernels, propagate, reverse_compose};
use crate::rng::stream;
use crate::schedule::UpdateSchedule;
use crate::seq::Vocabulary;
use crate::tabular::TabularDistribution;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// `true` when the check requires `value > threshold` (negative control).
    pub expect_above: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

fn below(name: &str, value: f64, threshold: f64) -> Check {
    Check { name: name.into(), value, threshold, expect_above: false, passed: value < threshold }
}

fn above(name: &str, value: f64, threshold: f64) -> Check {
    Check { name: name.into(), value, threshold, expect_above: true, passed: value > threshold }
}

/// Detailed balance on a Potts chain (L=4, |Σ|=3), heat-bath stationarity,
/// reverse-composition round trip and row-stochasticity.
pub fn run_suite(seed: u64) -> Result<VerifyReport> {
    let vocab = Vocabulary::new(3)?;
    let mut rng = stream(seed, 0);
    let potts = PottsEnergy::random(4, vocab, 1.0, &mut rng)?;
    let mut checks = vec![
        below(
            "metropolis_detailed_balance",
            detailed_balance_residual(&potts, 4, KernelRule::Metropolis, 1.0)?,
            1e-12,
        ),
        below(
            "heat_bath_detailed_balance",
            detailed_balance_residual(&potts, 4, KernelRule::HeatBath, 1.0)?,
            1e-12,
        ),
        above(
            "misweighted_acceptance_negative_control",
            detailed_balance_residual(&potts, 4, KernelRule::MisweightedMetropolis(2.0), 1.0)?,
            1e-3,
        ),
    ];

    let target = TabularDistribution::random(4, vocab, &mut rng)?;
    let mut stationarity: f64 = 0.0;
    let mut row_error: f64 = 0.0;
    for k in 0..4 {
        let m = heat_bath_kernel(&target, target.space(), k, 0)?;
        stationarity = stationarity.max(stationarity_residual(target.probs(), &m));
        row_error = row_error.max(m.max_row_error());
    }
    checks.push(below("heat_bath_stationarity_l1", stationarity, 1e-12));
    checks.push(below("kernel_row_stochastic", row_error, 1e-12));

    let p0 = TabularDistribution::random(4, vocab, &mut rng)?;
    let schedule = UpdateSchedule::build(4, 2, seed)?;
    let kernels = forward_kernels(&p0, &potts, &schedule, schedule.total_steps())?;
    let marginals = propagate(&p0, &kernels);
    let mass_error = marginals
        .iter()
        .map(|p| (p.probs().iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    checks.push(below("marginal_mass", mass_error, 1e-10));
    let back = reverse_compose(&marginals, &kernels);
    checks.push(below("reverse_round_trip_tv", tv_distance(p0.probs(), back.probs())?, 1e-10));

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { seed, checks, passed })
}
