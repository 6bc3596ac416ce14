use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{template_texts, words, ObservationVocabulary};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];
pub const DEFAULT_MAX_LEN: usize = 32;

/// Word-level tokenizer. Ids 0..4 are the special tokens; the rest are the
/// vocabulary words in sorted order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TokenizerRepr", into = "TokenizerRepr")]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
    max_len: usize,
}

#[derive(Serialize, Deserialize)]
struct TokenizerRepr {
    words: Vec<String>,
    max_len: usize,
}

impl From<TokenizerRepr> for Tokenizer {
    fn from(r: TokenizerRepr) -> Self {
        Self::from_words(r.words, r.max_len)
    }
}

impl From<Tokenizer> for TokenizerRepr {
    fn from(t: Tokenizer) -> Self {
        TokenizerRepr { words: t.words, max_len: t.max_len }
    }
}

impl Tokenizer {
    fn from_words(words: Vec<String>, max_len: usize) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index, max_len }
    }

    /// Builds a vocabulary from arbitrary texts.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, max_len: usize) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::config("encoder.max_len", "must be at least 2 (BOS and EOS)"));
        }
        let set: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(set);
        Ok(Self::from_words(all, max_len))
    }

    /// Vocabulary of the report templates plus every observation name and synonym.
    pub fn standard(vocab: &ObservationVocabulary, max_len: usize) -> Result<Self> {
        let mut texts: Vec<&str> = template_texts();
        for o in &vocab.observations {
            texts.push(o.name);
            texts.extend(o.synonyms.iter().copied());
        }
        Self::from_texts(texts, max_len)
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        id <= EOS
    }

    /// `[BOS, w.., EOS, PAD..]`, exactly `max_len` ids. Overlong input keeps
    /// its first `max_len - 2` words.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(self.max_len);
        ids.push(BOS);
        ids.extend(words(text).iter().take(self.max_len - 2).map(|w| self.id(w)));
        ids.push(EOS);
        ids.resize(self.max_len, PAD);
        ids
    }

    /// Ids of the words only, without BOS/EOS/padding.
    pub fn word_ids(&self, text: &str) -> Vec<u32> {
        words(text).iter().map(|w| self.id(w)).collect()
    }
}

/// Length of a padded id sequence once trailing PADs are removed.
pub fn unpadded_len(ids: &[u32]) -> usize {
    ids.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1)
}
