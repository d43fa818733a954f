use crate::error::{CoreError, Result};
use crate::seq::{Token, TokenSeq, Vocabulary};

/// Largest state space the exact routines will enumerate.
pub const ENUMERATION_LIMIT: usize = 10_000_000;

/// Mixed-radix indexing of `Σ^L`: `index = Σ_i x_i·|Σ|^i` (first position
/// least significant).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateEnumeration {
    len: usize,
    vocab: Vocabulary,
    total: usize,
}

impl StateEnumeration {
    pub fn new(len: usize, vocab: Vocabulary) -> Result<Self> {
        if len == 0 {
            return Err(CoreError::InvalidArgument("length must be positive".into()));
        }
        let states = (vocab.size() as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
        if states > ENUMERATION_LIMIT as u128 {
            return Err(CoreError::StateSpaceTooLarge { states, limit: ENUMERATION_LIMIT });
        }
        Ok(Self { len, vocab, total: states as usize })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// `|Σ|^k`, the index stride of position `k`.
    pub fn stride(&self, k: usize) -> usize {
        self.vocab.size().pow(k as u32)
    }

    pub fn index(&self, tokens: &[Token]) -> usize {
        tokens.iter().rev().fold(0, |acc, &t| acc * self.vocab.size() + t as usize)
    }

    pub fn decode_into(&self, mut index: usize, out: &mut [Token]) {
        let s = self.vocab.size();
        for slot in out.iter_mut() {
            *slot = (index % s) as Token;
            index /= s;
        }
    }

    pub fn decode(&self, index: usize) -> TokenSeq {
        let mut tokens = vec![0; self.len];
        self.decode_into(index, &mut tokens);
        TokenSeq::from_vec_unchecked(tokens)
    }

    /// Value of position `k` in the state with this index.
    pub fn digit(&self, index: usize, k: usize) -> Token {
        ((index / self.stride(k)) % self.vocab.size()) as Token
    }

    /// Index of the fiber base: the state with position `k` set to 0.
    pub fn fiber_base(&self, index: usize, k: usize) -> usize {
        index - self.digit(index, k) as usize * self.stride(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_indices() {
        let e = StateEnumeration::new(4, Vocabulary::new(3).unwrap()).unwrap();
        assert_eq!(e.total(), 81);
        for i in 0..e.total() {
            assert_eq!(e.index(e.decode(i).tokens()), i);
        }
        // first position least significant
        assert_eq!(e.index(&[1, 0, 0, 0]), 1);
        assert_eq!(e.index(&[0, 1, 0, 0]), 3);
    }

    #[test]
    fn guard_rejects_huge_spaces() {
        let v = Vocabulary::new(10).unwrap();
        assert!(StateEnumeration::new(7, v).is_ok());
        assert!(matches!(
            StateEnumeration::new(8, v),
            Err(CoreError::StateSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn fibers() {
        let e = StateEnumeration::new(3, Vocabulary::new(3).unwrap()).unwrap();
        let i = e.index(&[2, 1, 0]);
        assert_eq!(e.digit(i, 1), 1);
        assert_eq!(e.fiber_base(i, 1), e.index(&[2, 0, 0]));
    }
}
