//! Energy functions: a Potts chain for closed-form checks and the energy
//! induced by a causal language model.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::model::{gibbs_conditional, CausalModel, ConditionalModel, EnergyModel, Model};
use crate::seq::{Token, TokenSeq, Vocabulary};

/// `f(x) = −J·Σ_i 1[x_i = x_{i+1}] − Σ_i h[i][x_i]` on a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PottsEnergy {
    len: usize,
    vocab: Vocabulary,
    coupling: f64,
    field: Vec<f64>,
}

impl PottsEnergy {
    /// `field` is row-major `len × |Σ|`.
    pub fn new(len: usize, vocab: Vocabulary, coupling: f64, field: Vec<f64>) -> Result<Self> {
        if len == 0 {
            return Err(CoreError::InvalidArgument("empty chain".into()));
        }
        if field.len() != len * vocab.size() {
            return Err(CoreError::DimensionMismatch { expected: len * vocab.size(), actual: field.len() });
        }
        if !coupling.is_finite() || field.iter().any(|h| !h.is_finite()) {
            return Err(CoreError::InvalidArgument("non-finite Potts parameter".into()));
        }
        Ok(Self { len, vocab, coupling, field })
    }

    pub fn zero_field(len: usize, vocab: Vocabulary, coupling: f64) -> Result<Self> {
        Self::new(len, vocab, coupling, vec![0.0; len * vocab.size()])
    }

    /// Coupling and fields drawn uniformly from `[−scale, scale]`.
    pub fn random<R: Rng + ?Sized>(len: usize, vocab: Vocabulary, scale: f64, rng: &mut R) -> Result<Self> {
        let coupling = rng.gen_range(-scale..scale);
        let field = (0..len * vocab.size()).map(|_| rng.gen_range(-scale..scale)).collect();
        Self::new(len, vocab, coupling, field)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn h(&self, i: usize, v: Token) -> f64 {
        self.field[i * self.vocab.size() + v as usize]
    }

    /// Terms of `f` that involve position `k` when it holds `v`.
    fn local(&self, x: &TokenSeq, k: usize, v: Token) -> f64 {
        let mut e = -self.h(k, v);
        if k > 0 && x.get(k - 1) == v {
            e -= self.coupling;
        }
        if k + 1 < self.len && x.get(k + 1) == v {
            e -= self.coupling;
        }
        e
    }

    /// Heat-bath conditional `∝ e^{−f(x with x_k ← σ)}`.
    pub fn conditional(&self, x: &TokenSeq, k: usize) -> Result<Vec<f64>> {
        gibbs_conditional(self, x, k)
    }
}

impl Model for PottsEnergy {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }
}

impl EnergyModel for PottsEnergy {
    fn energy(&self, x: &TokenSeq) -> Result<f64> {
        if x.len() != self.len {
            return Err(CoreError::DimensionMismatch { expected: self.len, actual: x.len() });
        }
        let bonds = x.tokens().windows(2).filter(|w| w[0] == w[1]).count() as f64;
        let field: f64 = x.tokens().iter().enumerate().map(|(i, &v)| self.h(i, v)).sum();
        Ok(-self.coupling * bonds - field)
    }

    /// O(1): only the field at `k` and the two adjacent bonds change.
    fn energy_delta(&self, x: &TokenSeq, k: usize, sigma: Token) -> Result<f64> {
        Ok(self.local(x, k, sigma) - self.local(x, k, x.get(k)))
    }
}

impl ConditionalModel for PottsEnergy {
    fn infill(&self, x: &TokenSeq, k: usize, _t: usize) -> Result<Vec<f64>> {
        self.conditional(x, k)
    }
}

/// Mean log-probability `(1/L)·Σ_{i=1}^{L−1} log p(x_{i+1} | x_{1:i})`.
///
/// This is the literal perplexity functional; note it is a log-likelihood,
/// so larger is better.
pub fn causal_ppl<M: CausalModel + ?Sized>(model: &M, x: &TokenSeq) -> Result<f64> {
    Ok(token_log_probs(model, x, 1)?.iter().sum::<f64>() / x.len() as f64)
}

/// `log p(x_i | x_{<i})` for `i = from..L` (0-based).
fn token_log_probs<M: CausalModel + ?Sized>(model: &M, x: &TokenSeq, from: usize) -> Result<Vec<f64>> {
    let t = x.tokens();
    (from.max(1)..t.len())
        .map(|i| {
            let p = model.causal_next(&t[..i], 0)?;
            let pi = p[t[i] as usize];
            if !(pi > 0.0) {
                return Err(CoreError::ZeroProbability { index: i, token: t[i] });
            }
            Ok(pi.ln())
        })
        .collect()
}

/// `f(x) = −(β/L)·Σ_{i=1}^{L−1} log p_base(x_{i+1} | x_{1:i})`.
///
/// With `β = L` the Gibbs measure is the base model's sequence law with the
/// first token's marginal replaced by uniform.
#[derive(Debug, Clone)]
pub struct CausalEnergy<M> {
    base: M,
    beta: f64,
}

impl<M: CausalModel> CausalEnergy<M> {
    pub fn new(base: M, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(CoreError::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        Ok(Self { base, beta })
    }

    /// `β = L`.
    pub fn likelihood(base: M, len: usize) -> Self {
        Self { base, beta: len as f64 }
    }

    pub fn base(&self) -> &M {
        &self.base
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl<M: CausalModel> Model for CausalEnergy<M> {
    fn vocab(&self) -> Vocabulary {
        self.base.vocab()
    }
}

impl<M: CausalModel> EnergyModel for CausalEnergy<M> {
    fn energy(&self, x: &TokenSeq) -> Result<f64> {
        let s: f64 = token_log_probs(&self.base, x, 1)?.iter().sum();
        let e = -self.beta / x.len() as f64 * s;
        if !e.is_finite() {
            return Err(CoreError::NonFiniteEnergy(e));
        }
        Ok(e)
    }

    /// Recomputes only the terms at positions `>= k`, the ones whose target
    /// or prefix contains `x_k`.
    fn energy_delta(&self, x: &TokenSeq, k: usize, sigma: Token) -> Result<f64> {
        if sigma == x.get(k) {
            return Ok(0.0);
        }
        let before: f64 = token_log_probs(&self.base, x, k)?.iter().sum();
        let after: f64 = token_log_probs(&self.base, &x.with(k, sigma), k)?.iter().sum();
        let d = -self.beta / x.len() as f64 * (after - before);
        if !d.is_finite() {
            return Err(CoreError::NonFiniteEnergy(d));
        }
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BigramModel, UniformModel};
    use crate::rng::stream;

    fn v(n: usize) -> Vocabulary {
        Vocabulary::new(n).unwrap()
    }

    fn seq(t: &[Token], n: usize) -> TokenSeq {
        TokenSeq::new(t.to_vec(), v(n)).unwrap()
    }

    #[test]
    fn identity_substitution_has_zero_delta() {
        let e = PottsEnergy::zero_field(3, v(2), 1.0).unwrap();
        let x = seq(&[0, 1, 0], 2);
        assert_eq!(e.energy_delta(&x, 1, 1).unwrap(), 0.0);
    }

    #[test]
    fn breaking_two_bonds_costs_two() {
        let e = PottsEnergy::zero_field(3, v(2), 1.0).unwrap();
        let x = seq(&[0, 0, 0], 2);
        assert_eq!(e.energy_delta(&x, 1, 1).unwrap(), 2.0);
    }

    #[test]
    fn incremental_delta_matches_full_recompute() {
        let mut rng = stream(2, 0);
        let e = PottsEnergy::random(6, v(4), 1.5, &mut rng).unwrap();
        for _ in 0..200 {
            let x = TokenSeq::new((0..6).map(|_| rng.gen_range(0..4)).collect(), v(4)).unwrap();
            let k = rng.gen_range(0..6);
            let s = rng.gen_range(0..4);
            let full = e.energy(&x.with(k, s)).unwrap() - e.energy(&x).unwrap();
            assert!((e.energy_delta(&x, k, s).unwrap() - full).abs() < 1e-10);
        }
    }

    #[test]
    fn delta_antisymmetry() {
        let mut rng = stream(3, 0);
        let e = PottsEnergy::random(5, v(3), 1.0, &mut rng).unwrap();
        for _ in 0..100 {
            let x = TokenSeq::new((0..5).map(|_| rng.gen_range(0..3)).collect(), v(3)).unwrap();
            let k = rng.gen_range(0..5);
            let s = rng.gen_range(0..3);
            let y = x.with(k, s);
            let a = e.energy_delta(&x, k, s).unwrap();
            let b = e.energy_delta(&y, k, x.get(k)).unwrap();
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn potts_conditional_closed_forms() {
        let e = PottsEnergy::zero_field(3, v(3), 0.0).unwrap();
        for p in e.conditional(&seq(&[0, 1, 2], 3), 1).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let e = PottsEnergy::new(1, v(2), 0.7, vec![0.0, 3f64.ln()]).unwrap();
        let c = e.conditional(&seq(&[0], 2), 0).unwrap();
        assert!((c[0] - 0.25).abs() < 1e-15 && (c[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn potts_rejects_non_finite() {
        assert!(PottsEnergy::new(1, v(2), f64::NAN, vec![0.0, 0.0]).is_err());
        assert!(PottsEnergy::new(1, v(2), 0.0, vec![0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn uniform_causal_ppl() {
        let m = UniformModel::new(v(4));
        let x = seq(&[0, 3, 1], 4);
        let expected = 2.0 * (0.25f64).ln() / 3.0;
        assert!((causal_ppl(&m, &x).unwrap() - expected).abs() < 1e-15);
        assert!((expected - -0.9242).abs() < 1e-4);
    }

    #[test]
    fn point_mass_causal_ppl_is_zero() {
        // deterministic cycle 0 → 1 → 0
        let m = BigramModel::new(v(2), vec![1.0, 0.0], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(causal_ppl(&m, &seq(&[0, 1, 0, 1], 2)).unwrap(), 0.0);
        assert_eq!(
            causal_ppl(&m, &seq(&[0, 0], 2)),
            Err(CoreError::ZeroProbability { index: 1, token: 0 })
        );
    }

    fn random_bigram(n: usize, rng: &mut impl Rng) -> BigramModel {
        let norm = |w: Vec<f64>| {
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect::<Vec<_>>()
        };
        let init = norm((0..n).map(|_| rng.gen::<f64>() + 0.05).collect());
        let mut trans = Vec::new();
        for _ in 0..n {
            trans.extend(norm((0..n).map(|_| rng.gen::<f64>() + 0.05).collect()));
        }
        BigramModel::new(v(n), init, trans).unwrap()
    }

    #[test]
    fn causal_energy_delta_matches_full_recompute() {
        let mut rng = stream(8, 0);
        let e = CausalEnergy::new(random_bigram(3, &mut rng), 2.5).unwrap();
        for _ in 0..200 {
            let x = TokenSeq::new((0..5).map(|_| rng.gen_range(0..3)).collect(), v(3)).unwrap();
            let k = rng.gen_range(0..5);
            let s = rng.gen_range(0..3);
            let full = e.energy(&x.with(k, s)).unwrap() - e.energy(&x).unwrap();
            assert!((e.energy_delta(&x, k, s).unwrap() - full).abs() < 1e-10);
        }
    }

    #[test]
    fn likelihood_scaled_energy_recovers_sequence_law() {
        let mut rng = stream(9, 0);
        let base = random_bigram(3, &mut rng);
        let e = CausalEnergy::likelihood(base.clone(), 4);
        for _ in 0..50 {
            let x = TokenSeq::new((0..4).map(|_| rng.gen_range(0..3)).collect(), v(3)).unwrap();
            let t = x.tokens();
            let log_prod: f64 = (1..4)
                .map(|i| base.causal_next(&t[..i], 0).unwrap()[t[i] as usize].ln())
                .sum();
            assert!((-e.energy(&x).unwrap() - log_prod).abs() < 1e-10);
        }
    }

    #[test]
    fn beta_must_be_positive() {
        assert!(CausalEnergy::new(UniformModel::new(v(2)), 0.0).is_err());
    }
}
