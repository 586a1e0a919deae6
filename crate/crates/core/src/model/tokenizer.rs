//! Whitespace/lowercase word tokenizer over a corpus-built vocabulary.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;
pub const NUM_SPECIAL: usize = 5;

const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Lowercased words; any character that is not alphanumeric separates words.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Special tokens first, then corpus words by descending count with ties
    /// broken alphabetically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for w in words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .collect::<Vec<_>>();
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// Tokenized text: position 0 is `[CLS]`, real words follow, then `[SEP]`,
/// then `[PAD]` up to the fixed length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub special_positions: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.attention_mask.iter().filter(|m| **m == 1).count()
    }

    /// Positions eligible for MLM masking.
    pub fn maskable_positions(&self) -> Vec<usize> {
        (0..self.ids.len())
            .filter(|p| self.special_positions.binary_search(p).is_err())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub vocab: Vocabulary,
    pub max_len: usize,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary, max_len: usize) -> Result<Self> {
        if max_len < 3 {
            return Err(Error::InvalidConfig(
                "max_text_len must leave room for [CLS], one word and [SEP]".into(),
            ));
        }
        Ok(Self { vocab, max_len })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let mut body = words(text);
        if body.is_empty() {
            return Err(Error::EmptyText);
        }
        body.truncate(self.max_len - 2);
        let mut ids = Vec::with_capacity(self.max_len);
        ids.push(CLS_ID);
        ids.extend(body.iter().map(|w| self.vocab.id(w)));
        ids.push(SEP_ID);
        let valid = ids.len();
        ids.resize(self.max_len, PAD_ID);
        let attention_mask = (0..self.max_len).map(|i| u8::from(i < valid)).collect();
        let special_positions = std::iter::once(0).chain(valid - 1..self.max_len).collect();
        Ok(TokenSequence {
            ids,
            attention_mask,
            special_positions,
        })
    }
}
