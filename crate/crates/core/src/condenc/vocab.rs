use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plm::{BOS, EOS, PAD, UNK};

pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Word-level vocabulary shared by the model, the tasks and the condition
/// encoder. Ids `0..4` are reserved for pad, unk, bos and eos.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds from raw texts: lowercased whitespace tokens sorted by
    /// descending frequency, ties broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *counts.entry(w.to_lowercase()).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_list(words.into_iter().map(|(w, _)| w))
    }

    /// Builds from an explicit token list (after the reserved ids).
    /// Duplicates keep their first position.
    pub fn from_list(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for w in words {
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len() as u32);
                tokens.push(w);
            }
        }
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn get(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::Vocabulary {
                id,
                size: self.tokens.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Space-joined surface form, stopping at the end token and skipping
    /// pad/bos.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.tokens.get(i as usize).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn ids(&self, words: &[&str]) -> Vec<u32> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    /// Deserializes and restores the lookup table.
    pub fn from_json(s: &str) -> Result<Self> {
        let mut v: Vocab = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        if v.tokens.len() < RESERVED.len() || v.tokens[..4].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Parse("vocabulary is missing the reserved tokens".into()));
        }
        v.rebuild_index();
        Ok(v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocab serializes")
    }
}

/// Lowercased whitespace tokenization; unknown words map to the unk id.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    text.split_whitespace().map(|w| vocab.id(&w.to_lowercase())).collect()
}

/// Clips to the first `t_c` ids or pads the tail with the pad id.
pub fn clip_pad(ids: &[u32], t_c: usize) -> Vec<u32> {
    let mut out: Vec<u32> = ids.iter().copied().take(t_c).collect();
    out.resize(t_c, PAD);
    out
}
