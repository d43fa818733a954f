//! Contracts shared by forward kernels, learned reverse models and energies.

use crate::error::{CoreError, Result};
use crate::seq::{Token, TokenSeq, Vocabulary};

/// Anything defined over a fixed vocabulary.
pub trait Model {
    fn vocab(&self) -> Vocabulary;
}

/// A distribution over `Σ` at one position given all the others.
///
/// Implementations must not read `x[k]`; the position is masked out.
pub trait ConditionalModel: Model {
    fn infill(&self, x: &TokenSeq, k: usize, t: usize) -> Result<Vec<f64>>;

    /// Batched infill at a shared position and time.
    fn infill_batch(&self, xs: &[TokenSeq], k: usize, t: usize) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.infill(x, k, t)).collect()
    }
}

/// Next-token distributions for a left-to-right model.
pub trait CausalModel: Model {
    fn causal_next(&self, prefix: &[Token], t: usize) -> Result<Vec<f64>>;
}

/// A real-valued energy `f` defining the Gibbs measure `∝ e^{−f}`.
pub trait EnergyModel: Model {
    fn energy(&self, x: &TokenSeq) -> Result<f64>;

    /// `f(x with x_k ← σ) − f(x)`. The default recomputes both energies.
    fn energy_delta(&self, x: &TokenSeq, k: usize, sigma: Token) -> Result<f64> {
        if sigma == x.get(k) {
            return Ok(0.0);
        }
        let before = self.energy(x)?;
        let after = self.energy(&x.with(k, sigma))?;
        let d = after - before;
        if !d.is_finite() {
            return Err(CoreError::NonFiniteEnergy(d));
        }
        Ok(d)
    }
}

impl<M: Model + ?Sized> Model for &M {
    fn vocab(&self) -> Vocabulary {
        (**self).vocab()
    }
}

impl<M: ConditionalModel + ?Sized> ConditionalModel for &M {
    fn infill(&self, x: &TokenSeq, k: usize, t: usize) -> Result<Vec<f64>> {
        (**self).infill(x, k, t)
    }
    fn infill_batch(&self, xs: &[TokenSeq], k: usize, t: usize) -> Result<Vec<Vec<f64>>> {
        (**self).infill_batch(xs, k, t)
    }
}

impl<M: CausalModel + ?Sized> CausalModel for &M {
    fn causal_next(&self, prefix: &[Token], t: usize) -> Result<Vec<f64>> {
        (**self).causal_next(prefix, t)
    }
}

/// Uniform over `Σ` in every mode.
#[derive(Debug, Clone, Copy)]
pub struct UniformModel {
    vocab: Vocabulary,
}

impl UniformModel {
    pub fn new(vocab: Vocabulary) -> Self {
        Self { vocab }
    }

    fn row(&self) -> Vec<f64> {
        vec![1.0 / self.vocab.size() as f64; self.vocab.size()]
    }
}

impl Model for UniformModel {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }
}

impl ConditionalModel for UniformModel {
    fn infill(&self, _x: &TokenSeq, _k: usize, _t: usize) -> Result<Vec<f64>> {
        Ok(self.row())
    }
}

impl CausalModel for UniformModel {
    fn causal_next(&self, _prefix: &[Token], _t: usize) -> Result<Vec<f64>> {
        Ok(self.row())
    }
}

/// First-order Markov (bigram) causal model: an initial distribution and a
/// row-stochastic transition table.
#[derive(Debug, Clone)]
pub struct BigramModel {
    vocab: Vocabulary,
    initial: Vec<f64>,
    transition: Vec<f64>,
}

impl BigramModel {
    pub fn new(vocab: Vocabulary, initial: Vec<f64>, transition: Vec<f64>) -> Result<Self> {
        let s = vocab.size();
        if initial.len() != s {
            return Err(CoreError::DimensionMismatch { expected: s, actual: initial.len() });
        }
        if transition.len() != s * s {
            return Err(CoreError::DimensionMismatch { expected: s * s, actual: transition.len() });
        }
        crate::seq::check_distribution(&initial, 1e-9)?;
        for row in transition.chunks(s) {
            crate::seq::check_distribution(row, 1e-9)?;
        }
        Ok(Self { vocab, initial, transition })
    }
}

impl Model for BigramModel {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }
}

impl CausalModel for BigramModel {
    fn causal_next(&self, prefix: &[Token], _t: usize) -> Result<Vec<f64>> {
        let s = self.vocab.size();
        Ok(match prefix.last() {
            None => self.initial.clone(),
            Some(&prev) => self.transition[prev as usize * s..(prev as usize + 1) * s].to_vec(),
        })
    }
}

/// Heat-bath conditional of any energy: softmax over `σ` of `−f(x with x_k ← σ)`.
pub fn gibbs_conditional<E: EnergyModel + ?Sized>(energy: &E, x: &TokenSeq, k: usize) -> Result<Vec<f64>> {
    let s = energy.vocab().size();
    let mut logits = Vec::with_capacity(s);
    for sigma in 0..s as Token {
        logits.push(-energy.energy_delta(x, k, sigma)?);
    }
    Ok(softmax(&logits))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}
