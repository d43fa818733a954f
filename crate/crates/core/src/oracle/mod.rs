//! Exact brute-force references on enumerable state spaces.

pub mod balance;
pub mod distance;
pub mod enumeration;
pub mod gap;
pub mod kernel;
pub mod marginals;
pub mod verify;

pub use balance::{detailed_balance_residual, gibbs_measure, stationarity_residual};
pub use distance::{kl_divergence, tv_distance};
pub use enumeration::{StateEnumeration, ENUMERATION_LIMIT};
pub use gap::{optimal_reverse_infill, path_ratio_implied_infill, target_gap_report, GapRow, TargetGapReport};
pub use kernel::{energy_kernel, heat_bath_kernel, KernelRule, StepKernelMatrix};
pub use marginals::{exact_marginals, exact_reverse_kernel, forward_kernels, propagate, reverse_compose, reverse_row};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::PottsEnergy;
    use crate::model::{ConditionalModel, Model, UniformModel};
    use crate::rng::stream;
    use crate::schedule::UpdateSchedule;
    use crate::seq::{TokenSeq, Vocabulary};
    use crate::tabular::TabularDistribution;
    use crate::chain::run_forward;

    fn v(n: usize) -> Vocabulary {
        Vocabulary::new(n).unwrap()
    }

    /// Heat-bath kernel of a fixed two-state distribution at L = 1.
    struct Fixed(Vec<f64>);
    impl Model for Fixed {
        fn vocab(&self) -> Vocabulary {
            v(self.0.len())
        }
    }
    impl ConditionalModel for Fixed {
        fn infill(&self, _: &TokenSeq, _: usize, _: usize) -> crate::Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn one_resample_reaches_the_conditional() {
        let p0 = TabularDistribution::new(1, v(2), vec![1.0, 0.0]).unwrap();
        let s = UpdateSchedule::build(1, 1, 0).unwrap();
        let m = exact_marginals(&p0, &Fixed(vec![0.5, 0.5]), &s, 1).unwrap();
        assert_eq!(m[1].probs(), &[0.5, 0.5]);
    }

    #[test]
    fn own_conditionals_leave_distribution_fixed() {
        let mut rng = stream(1, 0);
        let p0 = TabularDistribution::random(3, v(3), &mut rng).unwrap();
        let s = UpdateSchedule::build(3, 2, 5).unwrap();
        let m = exact_marginals(&p0, &p0, &s, 6).unwrap();
        for pt in &m {
            assert!(tv_distance(pt.probs(), p0.probs()).unwrap() < 1e-12);
            assert!((pt.probs().iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn monte_carlo_forward_matches_exact_marginals() {
        let vocab = v(2);
        let mut rng = stream(2, 0);
        let potts = PottsEnergy::random(3, vocab, 1.0, &mut rng).unwrap();
        let p0 = TabularDistribution::random(3, vocab, &mut rng).unwrap();
        let s = UpdateSchedule::build(3, 1, 3).unwrap();
        let exact = exact_marginals(&p0, &potts, &s, 2).unwrap();
        let n = 100_000;
        let mut counts = vec![0usize; 8];
        let mut rng = stream(4, 0);
        for _ in 0..n {
            let x0 = p0.sample(&mut rng);
            let traj = run_forward(&x0, 2, &potts, &s, &mut rng, &[]).unwrap();
            counts[p0.space().index(traj.final_state().tokens())] += 1;
        }
        for (c, &p) in counts.iter().zip(exact[2].probs()) {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() < 3.0 * se + 1e-12);
        }
    }

    #[test]
    fn forced_support_reverse_row() {
        let p0 = TabularDistribution::new(1, v(2), vec![1.0, 0.0]).unwrap();
        let kernel = Fixed(vec![0.3, 0.7]);
        let fwd = heat_bath_kernel(&kernel, p0.space(), 0, 0).unwrap();
        let rev = exact_reverse_kernel(&p0, &fwd);
        assert_eq!(rev.row(0), &[1.0, 0.0]);
        assert_eq!(rev.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn reverse_composition_round_trip() {
        let vocab = v(3);
        let mut rng = stream(6, 0);
        let p0 = TabularDistribution::random(3, vocab, &mut rng).unwrap();
        let potts = PottsEnergy::random(3, vocab, 1.5, &mut rng).unwrap();
        let s = UpdateSchedule::build(3, 3, 1).unwrap();
        let kernels = forward_kernels(&p0, &potts, &s, 9).unwrap();
        let marg = propagate(&p0, &kernels);
        let back = reverse_compose(&marg, &kernels);
        assert!(tv_distance(p0.probs(), back.probs()).unwrap() < 1e-10);
        for (t, k) in kernels.iter().enumerate() {
            assert!(k.max_row_error() < 1e-12);
            let rev = exact_reverse_kernel(&marg[t], k);
            assert!(rev.max_row_error() < 1e-12);
        }
    }

    #[test]
    fn round_trip_with_point_mass_start() {
        let vocab = v(2);
        let x = TokenSeq::new(vec![1, 0, 1], vocab).unwrap();
        let p0 = TabularDistribution::point_mass(&x, vocab).unwrap();
        let mut rng = stream(7, 0);
        let potts = PottsEnergy::random(3, vocab, 1.0, &mut rng).unwrap();
        let s = UpdateSchedule::build(3, 2, 2).unwrap();
        let kernels = forward_kernels(&p0, &potts, &s, 6).unwrap();
        let marg = propagate(&p0, &kernels);
        let back = reverse_compose(&marg, &kernels);
        assert!(tv_distance(p0.probs(), back.probs()).unwrap() < 1e-10);
        // unreachable states have undefined reverse rows
        let rev = exact_reverse_kernel(&marg[0], &kernels[0]);
        let unreachable = (0..8).find(|&i| marg[1].probs()[i] == 0.0).unwrap();
        assert!(reverse_row(&rev, unreachable).is_err());
    }

    #[test]
    fn stationary_reverse_equals_forward() {
        let mut rng = stream(8, 0);
        let p = TabularDistribution::random(3, v(3), &mut rng).unwrap();
        for k in 0..3 {
            let fwd = heat_bath_kernel(&p, p.space(), k, 0).unwrap();
            let rev = exact_reverse_kernel(&p, &fwd);
            for x in 0..p.space().total() {
                for (a, b) in fwd.row(x).iter().zip(rev.row(x)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn detailed_balance_and_negative_control() {
        let vocab = v(3);
        let mut rng = stream(9, 0);
        let potts = PottsEnergy::random(4, vocab, 1.0, &mut rng).unwrap();
        assert!(detailed_balance_residual(&potts, 4, KernelRule::Metropolis, 1.0).unwrap() < 1e-12);
        assert!(detailed_balance_residual(&potts, 4, KernelRule::Metropolis, 0.7).unwrap() < 1e-12);
        assert!(detailed_balance_residual(&potts, 4, KernelRule::HeatBath, 1.0).unwrap() < 1e-12);
        assert!(detailed_balance_residual(&potts, 4, KernelRule::MisweightedMetropolis(2.0), 1.0).unwrap() > 1e-3);
    }

    #[test]
    fn potts_conditional_matches_enumerated_gibbs_measure() {
        let vocab = v(3);
        let mut rng = stream(10, 0);
        let potts = PottsEnergy::random(4, vocab, 1.0, &mut rng).unwrap();
        let space = StateEnumeration::new(4, vocab).unwrap();
        let gibbs = TabularDistribution::from_space(space, gibbs_measure(&potts, space, 1.0).unwrap()).unwrap();
        for idx in 0..space.total() {
            let x = space.decode(idx);
            for k in 0..4 {
                let a = potts.conditional(&x, k).unwrap();
                let b = gibbs.conditional(x.tokens(), k).unwrap();
                for (p, q) in a.iter().zip(&b) {
                    assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn systematic_scan_preserves_stationary_law() {
        let mut rng = stream(11, 0);
        let p = TabularDistribution::random(4, v(3), &mut rng).unwrap();
        let s = UpdateSchedule::build(4, 1, 9).unwrap();
        let mut q = p.probs().to_vec();
        for t in 1..=4 {
            let k = s.coordinate_at(t).unwrap();
            let m = heat_bath_kernel(&p, p.space(), k, 0).unwrap();
            assert!(stationarity_residual(&q, &m) < 1e-12);
            q = m.apply(&q);
        }
        assert!(tv_distance(&q, p.probs()).unwrap() < 1e-12);
    }

    #[test]
    fn distances() {
        assert_eq!(tv_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let kl = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((kl - (0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln())).abs() < 1e-15);
        assert!((kl - 0.1438).abs() < 1e-4);
        assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
        assert_eq!(kl_divergence(&[0.0, 1.0], &[0.5, 0.5]).unwrap(), 2f64.ln());
        assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn optimal_infill_basics() {
        let vocab = v(3);
        let x = TokenSeq::new(vec![2, 1], vocab).unwrap();
        let u = TabularDistribution::uniform(2, vocab).unwrap();
        for p in optimal_reverse_infill(&u, &x, 0).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let pm = TabularDistribution::point_mass(&x, vocab).unwrap();
        assert_eq!(optimal_reverse_infill(&pm, &x, 0).unwrap(), vec![0.0, 0.0, 1.0]);
        // invariant to the masked value
        assert_eq!(
            optimal_reverse_infill(&pm, &x.with(0, 0), 0).unwrap(),
            optimal_reverse_infill(&pm, &x, 0).unwrap()
        );
        // zero fiber mass
        assert!(optimal_reverse_infill(&pm, &x.with(1, 0), 0).is_err());
    }

    #[test]
    fn gap_vanishes_at_uniform_equilibrium() {
        let vocab = v(3);
        let p0 = TabularDistribution::uniform(3, vocab).unwrap();
        let s = UpdateSchedule::build(3, 2, 4).unwrap();
        let report = target_gap_report(&p0, &UniformModel::new(vocab), &s).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert!(report.rows.iter().all(|r| r.kl.abs() < 1e-10));
        assert!(report.to_csv().starts_with("t,coordinate,kl\n"));
    }

    #[test]
    fn gap_is_nonzero_at_non_uniform_equilibrium() {
        // the q² implied infill differs from the stationary conditional q
        let mut rng = stream(12, 0);
        let p0 = TabularDistribution::random(2, v(3), &mut rng).unwrap();
        let s = UpdateSchedule::build(2, 1, 4).unwrap();
        let report = target_gap_report(&p0, &p0, &s).unwrap();
        assert!(report.rows.iter().all(|r| r.kl > 1e-6 && r.kl.is_finite()));
    }

    #[test]
    fn gap_at_first_step_from_point_mass() {
        let vocab = v(3);
        let x = TokenSeq::new(vec![1, 2], vocab).unwrap();
        let p0 = TabularDistribution::point_mass(&x, vocab).unwrap();
        let mut rng = stream(13, 0);
        let kernel = PottsEnergy::random(2, vocab, 1.0, &mut rng).unwrap();
        let s = UpdateSchedule::build(2, 2, 6).unwrap();
        let report = target_gap_report(&p0, &kernel, &s).unwrap();
        let k = s.coordinate_at(1).unwrap();
        // independent closed form: KL(δ_{x_k} ‖ q²/Σq²) = −log(q(x_k)²/Σq²)
        let q = kernel.conditional(&x, k).unwrap();
        let z: f64 = q.iter().map(|a| a * a).sum();
        let expected = -((q[x.get(k) as usize].powi(2)) / z).ln();
        assert!((report.rows[0].kl - expected).abs() < 1e-12);
        assert!(report.rows.iter().all(|r| r.kl.is_finite()));
    }

    #[test]
    fn verify_suite_passes() {
        let report = verify::run_suite(0).unwrap();
        assert!(report.passed, "{report:?}");
    }
}
