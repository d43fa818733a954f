//! Hidden Markov corpora with exact sequence likelihoods.

use glauber_core::rng::sample_index;
use glauber_core::{stream, StreamRng, TabularDistribution, Token, TokenSeq, Vocabulary};
use glauber_net::{Corpus, Example};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TaskError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmCorpus {
    pub hidden: usize,
    pub vocab: usize,
    pub len: usize,
    pub initial: Vec<f64>,
    /// `transition[h][h']`.
    pub transition: Vec<Vec<f64>>,
    /// `emission[h][σ]`.
    pub emission: Vec<Vec<f64>>,
}

fn dirichlet(k: usize, alpha: f64, rng: &mut StreamRng) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("positive shape");
    let mut v: Vec<f64> = (0..k).map(|_| g.sample(rng).max(1e-300)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn check_rows(name: &str, rows: &[Vec<f64>], width: usize) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width || r.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(TaskError::Invalid(format!("{name} row {i} malformed")));
        }
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(TaskError::Invalid(format!("{name} row {i} sums to {s}")));
        }
    }
    Ok(())
}

impl HmmCorpus {
    pub fn new(len: usize, initial: Vec<f64>, transition: Vec<Vec<f64>>, emission: Vec<Vec<f64>>) -> Result<Self> {
        let hidden = initial.len();
        let vocab = emission.first().map_or(0, |r| r.len());
        if hidden == 0 || vocab == 0 || len == 0 || transition.len() != hidden || emission.len() != hidden {
            return Err(TaskError::Invalid("empty or inconsistent HMM tables".into()));
        }
        check_rows("initial", std::slice::from_ref(&initial), hidden)?;
        check_rows("transition", &transition, hidden)?;
        check_rows("emission", &emission, vocab)?;
        Ok(Self { hidden, vocab, len, initial, transition, emission })
    }

    /// Random tables; small `alpha` gives peaked, strongly correlated chains.
    pub fn random(hidden: usize, vocab: usize, len: usize, alpha: f64, seed: u64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(TaskError::Invalid(format!("concentration {alpha} must be positive")));
        }
        let mut rng = stream(seed, 0);
        let initial = dirichlet(hidden, 1.0, &mut rng);
        let transition = (0..hidden).map(|_| dirichlet(hidden, alpha, &mut rng)).collect();
        let emission = (0..hidden).map(|_| dirichlet(vocab, alpha, &mut rng)).collect();
        Self::new(len, initial, transition, emission)
    }

    pub fn sample(&self, rng: &mut StreamRng) -> Vec<Token> {
        let mut h = sample_index(&self.initial, rng);
        let mut out = Vec::with_capacity(self.len);
        for i in 0..self.len {
            if i > 0 {
                h = sample_index(&self.transition[h], rng);
            }
            out.push(sample_index(&self.emission[h], rng) as Token);
        }
        out
    }

    /// `log p(x)` by the scaled forward recursion.
    pub fn log_likelihood(&self, x: &[Token]) -> Result<f64> {
        if x.len() != self.len {
            return Err(TaskError::Invalid(format!("sequence of length {} for an HMM of length {}", x.len(), self.len)));
        }
        if let Some(&t) = x.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(TaskError::Invalid(format!("token {t} outside vocabulary")));
        }
        let mut alpha: Vec<f64> = (0..self.hidden).map(|h| self.initial[h] * self.emission[h][x[0] as usize]).collect();
        let mut logp = 0.0;
        for (i, &tok) in x.iter().enumerate() {
            if i > 0 {
                alpha = (0..self.hidden)
                    .map(|h2| (0..self.hidden).map(|h| alpha[h] * self.transition[h][h2]).sum::<f64>() * self.emission[h2][tok as usize])
                    .collect();
            }
            let s: f64 = alpha.iter().sum();
            if s == 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            logp += s.ln();
            alpha.iter_mut().for_each(|a| *a /= s);
        }
        Ok(logp)
    }

    /// Sum over every hidden path; exponential, for checking the recursion.
    pub fn likelihood_by_paths(&self, x: &[Token]) -> f64 {
        let paths = self.hidden.pow(self.len as u32);
        let mut total = 0.0;
        let mut hs = vec![0usize; self.len];
        for mut code in 0..paths {
            for h in hs.iter_mut() {
                *h = code % self.hidden;
                code /= self.hidden;
            }
            let mut p = self.initial[hs[0]] * self.emission[hs[0]][x[0] as usize];
            for i in 1..self.len {
                p *= self.transition[hs[i - 1]][hs[i]] * self.emission[hs[i]][x[i] as usize];
            }
            total += p;
        }
        total
    }

    /// Full joint table, for enumerable sizes.
    pub fn to_tabular(&self) -> Result<TabularDistribution> {
        let v = Vocabulary::new(self.vocab)?;
        let space = glauber_core::oracle::StateEnumeration::new(self.len, v)?;
        let probs: Vec<f64> = (0..space.total())
            .map(|i| self.log_likelihood(space.decode(i).tokens()).map(f64::exp))
            .collect::<Result<_>>()?;
        Ok(TabularDistribution::from_weights(self.len, v, probs)?)
    }

    pub fn token_seq(&self, x: Vec<Token>) -> Result<TokenSeq> {
        Ok(TokenSeq::new(x, Vocabulary::new(self.vocab)?)?)
    }
}

impl Corpus for HmmCorpus {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn seq_len(&self) -> usize {
        self.len
    }

    fn draw(&self, rng: &mut StreamRng) -> Example {
        Example::plain(self.sample(rng))
    }
}

/// Mean NLL of `samples` under the HMM with its standard error.
pub fn mean_nll(hmm: &HmmCorpus, samples: &[Vec<Token>]) -> Result<(f64, f64)> {
    let vals: Vec<f64> = samples.iter().map(|x| hmm.log_likelihood(x).map(|l| -l)).collect::<Result<_>>()?;
    Ok(crate::stats::mean_se(&vals))
}

/// A uniformly random sequence, for baselines.
pub fn uniform_sequence(hmm: &HmmCorpus, rng: &mut StreamRng) -> Vec<Token> {
    (0..hmm.len).map(|_| rng.gen_range(0..hmm.vocab) as Token).collect()
}
