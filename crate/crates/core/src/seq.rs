//! Vocabularies and fixed-length token sequences.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub type Token = u32;

/// A finite vocabulary `{0..size-1}` plus a reserved mask id used only as a
/// model input marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(CoreError::InvalidArgument(format!(
                "vocabulary size must be at least 2, got {size}"
            )));
        }
        if size >= u32::MAX as usize {
            return Err(CoreError::InvalidArgument("vocabulary too large".into()));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// First id past the vocabulary.
    pub fn mask_id(&self) -> Token {
        self.size as Token
    }

    pub fn contains(&self, token: Token) -> bool {
        (token as usize) < self.size
    }
}

/// A committed sequence `x ∈ Σ^L`. Never contains the mask id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    tokens: Vec<Token>,
}

impl TokenSeq {
    pub fn new(tokens: Vec<Token>, vocab: Vocabulary) -> Result<Self> {
        if tokens.is_empty() {
            return Err(CoreError::InvalidArgument("empty sequence".into()));
        }
        if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, &t)| !vocab.contains(t)) {
            return Err(CoreError::TokenOutOfRange {
                position,
                token,
                size: vocab.size(),
            });
        }
        Ok(Self { tokens })
    }

    /// Builds a sequence without range checks; callers guarantee validity.
    pub(crate) fn from_vec_unchecked(tokens: Vec<Token>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn get(&self, k: usize) -> Token {
        self.tokens[k]
    }

    pub fn into_vec(self) -> Vec<Token> {
        self.tokens
    }

    /// Returns a copy with position `k` replaced by `value`.
    pub fn with(&self, k: usize, value: Token) -> Self {
        let mut tokens = self.tokens.clone();
        tokens[k] = value;
        Self { tokens }
    }

    pub fn set(&mut self, k: usize, value: Token) {
        self.tokens[k] = value;
    }

    /// Model input with position `k` replaced by the mask id.
    pub fn masked_at(&self, k: usize, vocab: Vocabulary) -> Vec<Token> {
        let mut tokens = self.tokens.clone();
        tokens[k] = vocab.mask_id();
        tokens
    }
}

impl AsRef<[Token]> for TokenSeq {
    fn as_ref(&self) -> &[Token] {
        &self.tokens
    }
}

/// Validates a probability vector: nonnegative, finite, sums to one within `tol`.
pub fn check_distribution(p: &[f64], tol: f64) -> Result<()> {
    for (index, &value) in p.iter().enumerate() {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(CoreError::InvalidProbability { index, value });
        }
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(CoreError::NotNormalized { sum });
    }
    Ok(())
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}
