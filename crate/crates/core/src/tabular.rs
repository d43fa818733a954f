//! Explicit distributions over all of `Σ^L`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{CausalModel, ConditionalModel, Model};
use crate::oracle::enumeration::StateEnumeration;
use crate::rng::sample_index;
use crate::seq::{Token, TokenSeq, Vocabulary};

const ENCODING: &str = "mixed-radix, index = Σ x_i·|Σ|^{i−1}";

/// Probabilities of every state, indexed by [`StateEnumeration`].
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDistribution {
    space: StateEnumeration,
    probs: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    #[serde(rename = "L")]
    len: usize,
    sigma: usize,
    encoding: String,
}

impl TabularDistribution {
    pub fn new(len: usize, vocab: Vocabulary, probs: Vec<f64>) -> Result<Self> {
        let space = StateEnumeration::new(len, vocab)?;
        Self::from_space(space, probs)
    }

    pub fn from_space(space: StateEnumeration, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != space.total() {
            return Err(CoreError::DimensionMismatch { expected: space.total(), actual: probs.len() });
        }
        crate::seq::check_distribution(&probs, 1e-12)?;
        Ok(Self { space, probs })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(len: usize, vocab: Vocabulary, weights: Vec<f64>) -> Result<Self> {
        let z: f64 = weights.iter().sum();
        if !(z > 0.0) || !z.is_finite() {
            return Err(CoreError::NullEvent);
        }
        Self::new(len, vocab, weights.into_iter().map(|w| w / z).collect())
    }

    pub fn uniform(len: usize, vocab: Vocabulary) -> Result<Self> {
        let space = StateEnumeration::new(len, vocab)?;
        let n = space.total();
        Ok(Self { space, probs: vec![1.0 / n as f64; n] })
    }

    pub fn point_mass(x: &TokenSeq, vocab: Vocabulary) -> Result<Self> {
        let space = StateEnumeration::new(x.len(), vocab)?;
        let mut probs = vec![0.0; space.total()];
        probs[space.index(x.tokens())] = 1.0;
        Ok(Self { space, probs })
    }

    /// Random distribution with i.i.d. uniform(0,1) weights, normalized.
    pub fn random<R: Rng + ?Sized>(len: usize, vocab: Vocabulary, rng: &mut R) -> Result<Self> {
        let space = StateEnumeration::new(len, vocab)?;
        let weights = (0..space.total()).map(|_| rng.gen::<f64>()).collect();
        Self::from_weights(len, vocab, weights)
    }

    /// Internal constructor for vectors produced by exact propagation.
    pub(crate) fn from_raw(space: StateEnumeration, probs: Vec<f64>) -> Self {
        Self { space, probs }
    }

    pub fn space(&self) -> StateEnumeration {
        self.space
    }

    pub fn len(&self) -> usize {
        self.space.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, x: &[Token]) -> f64 {
        self.probs[self.space.index(x)]
    }

    /// `p(x_k = · | x_{\k})`.
    pub fn conditional(&self, x: &[Token], k: usize) -> Result<Vec<f64>> {
        let s = self.space.vocab().size();
        let base = self.space.fiber_base(self.space.index(x), k);
        let stride = self.space.stride(k);
        let mut out: Vec<f64> = (0..s).map(|v| self.probs[base + v * stride]).collect();
        let z: f64 = out.iter().sum();
        if z <= 0.0 {
            return Err(CoreError::NullEvent);
        }
        out.iter_mut().for_each(|v| *v /= z);
        Ok(out)
    }

    /// Distribution of position `query` given the positions not in `hidden`
    /// (and not `query`); hidden positions are summed out.
    pub fn conditional_given(&self, x: &[Token], query: usize, hidden: &[usize]) -> Result<Vec<f64>> {
        let s = self.space.vocab().size();
        let mut out = vec![0.0; s];
        let mut state = vec![0 as Token; self.len()];
        for (i, &p) in self.probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            self.space.decode_into(i, &mut state);
            let agrees = (0..self.len()).all(|j| j == query || hidden.contains(&j) || state[j] == x[j]);
            if agrees {
                out[state[query] as usize] += p;
            }
        }
        let z: f64 = out.iter().sum();
        if z <= 0.0 {
            return Err(CoreError::NullEvent);
        }
        out.iter_mut().for_each(|v| *v /= z);
        Ok(out)
    }

    /// Marginal law of the next position given a prefix.
    pub fn next_given_prefix(&self, prefix: &[Token]) -> Result<Vec<f64>> {
        let m = prefix.len();
        if m >= self.len() {
            return Err(CoreError::InvalidArgument(format!("prefix length {m} >= L {}", self.len())));
        }
        let hidden: Vec<usize> = (m + 1..self.len()).collect();
        let mut x = prefix.to_vec();
        x.resize(self.len(), 0);
        self.conditional_given(&x, m, &hidden)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenSeq {
        self.space.decode(sample_index(&self.probs, rng))
    }

    /// Empirical distribution of a sample set.
    pub fn empirical(space: StateEnumeration, samples: &[TokenSeq]) -> Result<Self> {
        let mut counts = vec![0.0; space.total()];
        for x in samples {
            counts[space.index(x.tokens())] += 1.0;
        }
        Self::from_weights(space.len(), space.vocab(), counts)
    }

    /// Writes `<path>` as little-endian f64 and `<path>.json` as the sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.probs.len() * 8);
        for p in &self.probs {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        fs::write(path, bytes)?;
        let sidecar = Sidecar {
            len: self.len(),
            sigma: self.space.vocab().size(),
            encoding: ENCODING.into(),
        };
        fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        if sidecar.encoding != ENCODING {
            return Err(CoreError::Io(format!("unsupported encoding {:?}", sidecar.encoding)));
        }
        let bytes = fs::read(path)?;
        if bytes.len() % 8 != 0 {
            return Err(CoreError::Io("truncated probability table".into()));
        }
        let probs = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(sidecar.len, Vocabulary::new(sidecar.sigma)?, probs)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

impl Model for TabularDistribution {
    fn vocab(&self) -> Vocabulary {
        self.space.vocab()
    }
}

/// Time-independent heat-bath kernel of the table.
impl ConditionalModel for TabularDistribution {
    fn infill(&self, x: &TokenSeq, k: usize, _t: usize) -> Result<Vec<f64>> {
        self.conditional(x.tokens(), k)
    }
}

impl CausalModel for TabularDistribution {
    fn causal_next(&self, prefix: &[Token], _t: usize) -> Result<Vec<f64>> {
        self.next_given_prefix(prefix)
    }
}
