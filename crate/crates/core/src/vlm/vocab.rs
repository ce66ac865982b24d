//! Fixed synthetic vocabulary. One id per word, no subword machinery: the
//! scene language is small enough to enumerate.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Word list shared by dataset generation, training, and evaluation. The
/// order is frozen — ids are stable across runs and stored in checkpoints.
const WORDS: &[&str] = &[
    // specials
    "<ans>", "<eos>", "<cap>", // question scaffolding
    "is", "there", "a", "how", "many", "what", "color", "the", "where", "objects",
    // shapes
    "square", "circle", "triangle", // colors
    "red", "green", "blue", "yellow", // answers
    "yes", "no", "zero", "one", "two", "three", "four", "left", "right", "top", "bottom",
];

#[derive(Clone)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    /// The one synthetic vocabulary every component shares.
    pub fn synthetic() -> Vocab {
        Vocab::from_words(WORDS.iter().map(|w| w.to_string()).collect())
            .expect("builtin word list is duplicate-free")
    }

    /// Used by checkpoint loading; rejects duplicates.
    pub fn from_words(words: Vec<String>) -> Result<Vocab> {
        let mut ids = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if ids.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Corrupt(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Vocab { words, ids })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::Config(format!("word {word:?} not in vocabulary")))
    }

    pub fn word(&self, id: u32) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Config(format!("token id {id} out of range")))
    }

    /// Encode a whitespace-separated sentence.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.word(i)).collect();
        Ok(words?.join(" "))
    }
}
