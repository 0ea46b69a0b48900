//! Character vocabulary and validated token sequences.
//!
//! Token id layout is fixed for serialization: blank is 0, characters are
//! 1..=N in the order given, and a single shared sos/eos id sits at the end.

use super::{ModelError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn new(chars: &str) -> Result<Self> {
        let list: Vec<char> = chars.chars().collect();
        if list.is_empty() {
            return Err(ModelError::BadConfig("vocabulary needs at least one character".into()));
        }
        for (i, c) in list.iter().enumerate() {
            if list[..i].contains(c) {
                return Err(ModelError::BadConfig(format!("duplicate character {c:?} in vocabulary")));
            }
        }
        Ok(Vocab { chars: list })
    }

    /// Total output dimension: characters plus blank plus sos/eos.
    pub fn size(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn blank(&self) -> u32 {
        0
    }

    /// Shared start/end-of-sequence id.
    pub fn sos_eos(&self) -> u32 {
        (self.chars.len() + 1) as u32
    }

    pub fn char_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (1..=self.chars.len()).map(|i| i as u32)
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = Vec::with_capacity(text.chars().count());
        for c in text.chars() {
            match self.chars.iter().position(|&x| x == c) {
                Some(i) => ids.push((i + 1) as u32),
                None => return Err(ModelError::CharOutsideVocab(c)),
            }
        }
        self.tokens(ids)
    }

    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.ids().iter().map(|&id| self.chars[(id - 1) as usize]).collect()
    }

    /// Validate raw ids into a [`TokenSequence`]: no blank, no sos/eos, all
    /// in range.
    pub fn tokens(&self, ids: Vec<u32>) -> Result<TokenSequence> {
        for &id in &ids {
            if id == self.blank() || id == self.sos_eos() {
                return Err(ModelError::ReservedToken(id));
            }
            if id as usize >= self.size() {
                return Err(ModelError::TokenOutsideVocab(id));
            }
        }
        Ok(TokenSequence(ids))
    }
}

/// An ordered token sequence holding only real (non-reserved) tokens, usable
/// as a reference or hypothesis.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_fixed() {
        let v = Vocab::new("abc").unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.blank(), 0);
        assert_eq!(v.sos_eos(), 4);
        assert_eq!(v.encode("cab").unwrap().ids(), &[3, 1, 2]);
        assert_eq!(v.decode(&v.encode("cab").unwrap()), "cab");
    }

    #[test]
    fn reserved_tokens_rejected() {
        let v = Vocab::new("ab").unwrap();
        assert!(matches!(v.tokens(vec![0]), Err(ModelError::ReservedToken(0))));
        assert!(matches!(v.tokens(vec![3]), Err(ModelError::ReservedToken(3))));
        assert!(matches!(v.tokens(vec![9]), Err(ModelError::TokenOutsideVocab(9))));
    }

    #[test]
    fn duplicate_chars_rejected() {
        assert!(Vocab::new("aba").is_err());
    }
}
