use std::collections::BTreeSet;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::emotion::Emotion;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercase, split on whitespace, and split off every ASCII punctuation
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Dense token table. Ids: the four specials, then the eight emotion words
/// in canonical order, then corpus words in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(Emotion::ALL.iter().map(|e| e.name().to_string()));
        let fixed: BTreeSet<String> = tokens.iter().cloned().collect();
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(tokenize)
            .filter(|w| !fixed.contains(w))
            .collect();
        tokens.extend(words);
        Self::from_tokens(tokens).expect("built vocabulary is well-formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(Error::Config("vocabulary must start with <pad> <bos> <eos> <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn lookup(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.lookup(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn emotion_id(&self, emotion: Emotion) -> u32 {
        self.lookup(emotion.name()).expect("emotion words are always present")
    }

    /// Tokenize text into ids, unknown words mapping to UNK.
    pub fn encode_words(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|w| self.id_or_unk(w)).collect()
    }

    /// `BOS words... EOS`, truncated so the whole sequence is at most
    /// `max_len` long and still ends in EOS.
    pub fn encode_explanation(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        ids.extend(self.encode_words(text).into_iter().take(max_len.saturating_sub(2)));
        ids.push(EOS);
        ids
    }

    /// Join word tokens with spaces, dropping specials and stopping at EOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut words = Vec::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            if id == PAD || id == BOS {
                continue;
            }
            words.push(self.token(id).unwrap_or("<unk>"));
        }
        words.join(" ")
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(self) -> Result<Self> {
        Self::from_tokens(self.tokens)
    }
}
