//! Whitespace word tokenizer with a fixed vocabulary file.
//!
//! Tokenization is deliberately simple: lowercase, split on whitespace,
//! strip surrounding punctuation. Unknown words hash into a reserved
//! bucket range so lexical identity survives out-of-vocabulary text.
//! The trait keeps the encoder pluggable for other tokenizations.

use crate::error::{Error, Result};
use crate::rng::fnv1a64;
use std::collections::HashMap;
use std::path::Path;

pub trait Tokenize {
    fn tokenize(&self, text: &str) -> Vec<usize>;
    fn vocab_size(&self) -> usize;
}

#[derive(Clone, Debug)]
pub struct WordTokenizer {
    map: HashMap<String, usize>,
    known: usize,
    unk_buckets: usize,
}

/// Split raw text into normalized word tokens (no ids).
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Most frequent words first, ties alphabetical, at most `max_words`.
pub fn build_vocab<'a>(texts: impl Iterator<Item = &'a str>, max_words: usize) -> Vec<String> {
    let mut counts: std::collections::BTreeMap<String, usize> = std::collections::BTreeMap::new();
    for text in texts {
        for w in words(text) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    let mut items: Vec<(String, usize)> = counts.into_iter().collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    items.truncate(max_words);
    items.into_iter().map(|(w, _)| w).collect()
}

impl WordTokenizer {
    pub fn new(vocab: &[String], unk_buckets: usize) -> Self {
        let map = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        WordTokenizer {
            map,
            known: vocab.len(),
            unk_buckets,
        }
    }

    /// One token per line; line index = token id.
    pub fn from_vocab_file(path: &Path, unk_buckets: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let vocab: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        Ok(Self::new(&vocab, unk_buckets))
    }

    pub fn id_of(&self, word: &str) -> usize {
        match self.map.get(word) {
            Some(&id) => id,
            None => self.known + (fnv1a64(word.as_bytes()) as usize % self.unk_buckets),
        }
    }
}

impl Tokenize for WordTokenizer {
    fn tokenize(&self, text: &str) -> Vec<usize> {
        words(text).iter().map(|w| self.id_of(w)).collect()
    }

    fn vocab_size(&self) -> usize {
        self.known + self.unk_buckets
    }
}
