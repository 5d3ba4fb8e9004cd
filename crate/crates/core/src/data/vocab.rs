//! Token vocabulary with fixed reserved ids.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{bail, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const CLS: TokenId = 4;
pub const SEP: TokenId = 5;

/// Surface forms of the reserved ids, in id order.
pub const RESERVED: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<unk>", "[CLS]", "[SEP]"];

/// Ids a decoder may never emit.
pub fn is_structural(id: TokenId) -> bool {
    matches!(id, PAD | BOS | CLS | SEP)
}

/// Bijection between token strings and ids. Ids `0..6` are always the
/// reserved tokens in [`RESERVED`] order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.insert(t);
        }
        v
    }

    /// Builds a vocabulary from token streams, ids assigned in first-seen
    /// order.
    pub fn build<'a, I, S>(seqs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a str>,
    {
        let mut v = Self::new();
        for seq in seqs {
            for t in seq {
                v.insert(t);
            }
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id as usize)
            .map_or(RESERVED[UNK as usize], String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if v.index.contains_key(line) {
                bail!(Data, "duplicate vocab entry `{line}` on line {}", i + 1);
            }
            v.insert(line);
        }
        if v.tokens.len() < RESERVED.len()
            || v.tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            bail!(Data, "vocab file does not start with the reserved tokens");
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocab::build([vec!["a", "b", "a"]]);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("[SEP]"), SEP);
        assert_eq!(v.id("a"), 6);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn file_round_trip() {
        let v = Vocab::build([vec!["x", "y,", "z"]]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }
}
