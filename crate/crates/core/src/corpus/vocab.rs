use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::preprocess;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::invalid(
                "vocabulary must start with the special tokens",
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Ranks whitespace tokens by frequency (ties lexicographic), drops those
    /// seen fewer than `min_frequency` times, and caps the total size
    /// (specials included) at `max_size`.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        max_size: usize,
        min_frequency: usize,
    ) -> Result<Self> {
        if max_size < SPECIALS.len() {
            return Err(Error::invalid(format!(
                "vocabulary max_size {max_size} cannot hold the {} special tokens",
                SPECIALS.len()
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in corpus {
            for tok in text.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_frequency.max(1) && !SPECIALS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .take(max_size)
            .collect();
        Vocabulary::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex(&h.finalize())
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        Vocabulary::from_tokens(text.lines().map(str::to_string).collect())
    }

    /// `[CLS]` + token ids of the preprocessed text, truncated to `max_len`
    /// and right-padded with `[PAD]`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<EncodedSequence> {
        if max_len < 2 {
            return Err(Error::invalid(format!(
                "max_len must be >= 2, got {max_len}"
            )));
        }
        let clean = preprocess(text);
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(
            clean
                .split_whitespace()
                .take(max_len - 1)
                .map(|t| self.id(t)),
        );
        let len = ids.len();
        ids.resize(max_len, PAD);
        Ok(EncodedSequence { ids, len })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Token ids starting with `[CLS]`, padded at the tail. The attention mask
/// is implied by `len`: positions `< len` are real tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncodedSequence {
    ids: Vec<usize>,
    len: usize,
}

impl EncodedSequence {
    pub fn new(ids: Vec<usize>, len: usize) -> Result<Self> {
        if len == 0 || len > ids.len() || ids[0] != CLS || ids[len..].iter().any(|&i| i != PAD) {
            return Err(Error::invalid(
                "encoded sequence must start with [CLS] and pad only at the tail",
            ));
        }
        Ok(EncodedSequence { ids, len })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Number of real (unpadded) tokens, `[CLS]` included.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn attention_mask(&self) -> Vec<u8> {
        (0..self.ids.len())
            .map(|i| u8::from(i < self.len))
            .collect()
    }

    /// Overwrites a padded slot's token id. Used to probe padding invariance.
    pub fn with_pad_token(&self, position: usize, id: usize) -> Self {
        assert!(position >= self.len, "position {position} is not padding");
        let mut ids = self.ids.clone();
        ids[position] = id;
        EncodedSequence { ids, len: self.len }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_frequency_drops_rare_tokens() {
        let v = Vocabulary::build(["a a b"], 100, 2).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(5), Some("a"));
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn size_cap_keeps_most_frequent() {
        let corpus = "j j j a b c d e f g h i";
        let v = Vocabulary::build([corpus], 6, 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(5), Some("j"));
        let tie = Vocabulary::build(["z y x"], 7, 1).unwrap();
        assert_eq!(&tie.tokens()[5..], ["x", "y"]);
    }

    #[test]
    fn empty_corpus_gives_specials() {
        let v = Vocabulary::build(std::iter::empty(), 10, 1).unwrap();
        assert_eq!(v.tokens(), SPECIALS);
        assert!(Vocabulary::build(std::iter::empty(), 3, 1).is_err());
    }

    #[test]
    fn deterministic() {
        let c = ["the cat sat on the mat", "a dog sat on a log"];
        assert_eq!(
            Vocabulary::build(c, 50, 1).unwrap().hash(),
            Vocabulary::build(c, 50, 1).unwrap().hash()
        );
    }

    #[test]
    fn encode_rules() {
        let v = Vocabulary::build(["hello world hello"], 10, 1).unwrap();
        let e = v.encode("", 4).unwrap();
        assert_eq!(e.ids(), &[CLS, PAD, PAD, PAD]);
        assert_eq!(e.attention_mask(), vec![1, 0, 0, 0]);
        let e = v.encode("Hello stranger", 4).unwrap();
        assert_eq!(e.ids(), &[CLS, v.id("hello"), UNK, PAD]);
        let long = vec!["hello"; 100].join(" ");
        let e = v.encode(&long, 64).unwrap();
        assert_eq!(e.ids().len(), 64);
        assert_eq!(e.len(), 64);
        assert_eq!(e.ids()[0], CLS);
        assert!(v.encode("x", 1).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocabulary::build(["b a c a"], 10, 1).unwrap();
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
