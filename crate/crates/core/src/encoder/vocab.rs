use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const CLS: &str = "<cls>";
pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const MASK: &str = "<mask>";

/// The 20 canonical amino acids, in the order their ids are assigned.
pub const CANONICAL_RESIDUES: &str = "ACDEFGHIKLMNPQRSTVWY";
/// Residues with their own token beyond the canonical 20; `X` is the unknown bucket.
pub const EXTRA_RESIDUES: &str = "XBZUO";

/// Dense token ↔ id table. Serialized as the ordered token list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    cls: u32,
    pad: u32,
    eos: u32,
    mask: u32,
    unknown: u32,
}

impl TokenVocab {
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = [CLS, PAD, EOS, MASK].iter().map(|s| s.to_string()).collect();
        tokens.extend(CANONICAL_RESIDUES.chars().chain(EXTRA_RESIDUES.chars()).map(String::from));
        Self::from_tokens(tokens).expect("standard vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let find = |t: &str| index.get(t).copied().ok_or_else(|| Error::Format(format!("vocabulary lacks {t:?}")));
        Ok(Self { cls: find(CLS)?, pad: find(PAD)?, eos: find(EOS)?, mask: find(MASK)?, unknown: find("X")?, tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn cls(&self) -> u32 {
        self.cls
    }
    pub fn pad(&self) -> u32 {
        self.pad
    }
    pub fn eos(&self) -> u32 {
        self.eos
    }
    pub fn mask(&self) -> u32 {
        self.mask
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.cls || id == self.pad || id == self.eos || id == self.mask
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Id for a residue letter; anything without its own token maps to `X`.
    pub fn residue_id(&self, residue: char) -> u32 {
        let upper = residue.to_ascii_uppercase();
        let mut buf = [0u8; 4];
        self.index.get(upper.encode_utf8(&mut buf) as &str).copied().filter(|&id| !self.is_special(id)).unwrap_or(self.unknown)
    }

    /// Ids of the 20 canonical residues.
    pub fn canonical_ids(&self) -> Vec<u32> {
        CANONICAL_RESIDUES.chars().map(|c| self.residue_id(c)).collect()
    }

    /// `[CLS] residues [EOS]`, without any capacity check.
    pub fn encode(&self, seq: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(seq.len() + 2);
        ids.push(self.cls);
        ids.extend(seq.chars().map(|c| self.residue_id(c)));
        ids.push(self.eos);
        ids
    }

    /// Residue string of a token list, dropping structural tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().filter(|&&id| !self.is_special(id)).filter_map(|&id| self.token(id)).collect()
    }
}

impl Default for TokenVocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl Serialize for TokenVocab {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TokenVocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        TokenVocab::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_distinct() {
        let v = TokenVocab::standard();
        let ids = [v.cls(), v.eos(), v.pad(), v.mask()];
        for a in 0..4 {
            for b in a + 1..4 {
                assert_ne!(ids[a], ids[b]);
            }
        }
        assert_eq!(v.len(), 29);
    }

    #[test]
    fn unknowns_map_to_x() {
        let v = TokenVocab::standard();
        let x = v.residue_id('X');
        assert_eq!(v.encode("AJ?"), vec![v.cls(), v.residue_id('A'), x, x, v.eos()]);
        assert_ne!(v.residue_id('B'), x);
        assert_ne!(v.residue_id('O'), x);
        assert_eq!(v.residue_id('a'), v.residue_id('A'));
    }

    #[test]
    fn decode_inverts_encode_on_canonical() {
        let v = TokenVocab::standard();
        assert_eq!(v.decode(&v.encode(CANONICAL_RESIDUES)), CANONICAL_RESIDUES);
    }

    #[test]
    fn json_round_trip() {
        let v = TokenVocab::standard();
        let back: TokenVocab = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
    }
}
