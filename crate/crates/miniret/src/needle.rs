//! Synthetic long-context needle retrieval: per context length, haystack
//! documents of a fixed token count where exactly one document contains a
//! unique needle sentence the query asks about.

use crate::data::Document;
use crate::error::{Error, Result};
use crate::metrics::Qrels;
use crate::rng::rng_for;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DISTRACTORS_PER_TASK: usize = 99;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeedleTaskSpec {
    /// Token counts to generate, strictly ascending. Lengths past a
    /// model's window are still generated to measure extrapolation.
    pub lengths: Vec<usize>,
    #[serde(default = "default_tasks_per_length")]
    pub tasks_per_length: usize,
    pub seed: u64,
    /// Distinct filler words available for haystack text.
    #[serde(default = "default_filler_vocab")]
    pub filler_vocab: usize,
}

fn default_tasks_per_length() -> usize {
    3
}

fn default_filler_vocab() -> usize {
    200
}

impl NeedleTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() {
            return Err(Error::Config("needle: no context lengths".into()));
        }
        if !self.lengths.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("needle: lengths must be ascending".into()));
        }
        if self.lengths[0] < NEEDLE_WORDS + 1 {
            return Err(Error::Config(format!(
                "needle: lengths must exceed the needle sentence ({NEEDLE_WORDS} words)"
            )));
        }
        if self.tasks_per_length < 1 || self.filler_vocab < 2 {
            return Err(Error::Config(
                "needle: tasks_per_length >= 1 and filler_vocab >= 2 required".into(),
            ));
        }
        Ok(())
    }
}

/// Everything generated for one context length.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NeedleBundle {
    pub length: usize,
    pub docs: Vec<Document>,
    /// (query id, query text), one per task.
    pub queries: Vec<(String, String)>,
    pub qrels: Qrels,
}

const NEEDLE_WORDS: usize = 6;

fn needle_terms(length: usize, task: usize) -> Vec<String> {
    (0..NEEDLE_WORDS)
        .map(|w| format!("needle{length}t{task}w{w}"))
        .collect()
}

/// Haystack text of exactly `length` whitespace tokens drawn from the
/// filler vocabulary; filler words never collide with needle terms.
fn filler_text(length: usize, vocab: usize, rng: &mut impl Rng) -> Vec<String> {
    (0..length)
        .map(|_| format!("filler{:03}", rng.gen_range(0..vocab)))
        .collect()
}

/// Generate all bundles. Fully deterministic in the spec seed; token
/// counts are exact (the ±2% budget is met with zero slack).
pub fn gen_needle_corpus(spec: &NeedleTaskSpec) -> Result<Vec<NeedleBundle>> {
    spec.validate()?;
    let mut bundles = Vec::with_capacity(spec.lengths.len());
    for &length in &spec.lengths {
        let mut docs = Vec::new();
        let mut queries = Vec::new();
        let mut qrels = Qrels::default();
        for task in 0..spec.tasks_per_length {
            let mut rng = rng_for(spec.seed, &format!("needle/{length}/{task}"));
            let needle_doc_idx = rng.gen_range(0..DISTRACTORS_PER_TASK + 1);
            let terms = needle_terms(length, task);
            for d in 0..DISTRACTORS_PER_TASK + 1 {
                let doc_id = format!("L{length}t{task}d{d:03}");
                let mut words = filler_text(length, spec.filler_vocab, &mut rng);
                if d == needle_doc_idx {
                    // splice the needle sentence in at a seeded position,
                    // replacing filler so the count stays exact
                    let at = rng.gen_range(0..=length - NEEDLE_WORDS);
                    for (i, t) in terms.iter().enumerate() {
                        words[at + i] = t.clone();
                    }
                    qrels.add(&format!("L{length}q{task}"), &doc_id, 1);
                }
                docs.push(Document {
                    id: doc_id,
                    text: words.join(" "),
                    lang: "en".into(),
                });
            }
            queries.push((format!("L{length}q{task}"), terms.join(" ")));
        }
        bundles.push(NeedleBundle {
            length,
            docs,
            queries,
            qrels,
        });
    }
    Ok(bundles)
}

/// Collision-free lexical embedder: one coordinate per distinct word of
/// the corpus it was built from, normalized term counts. On needle
/// corpora it is a perfect oracle, because each query's terms occur in
/// exactly one document.
#[derive(Clone, Debug)]
pub struct BagOfWordsEmbedder {
    vocab: BTreeMap<String, usize>,
}

impl BagOfWordsEmbedder {
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>) -> Self {
        let mut vocab = BTreeMap::new();
        for text in texts {
            for word in text.split_whitespace() {
                let next = vocab.len();
                vocab.entry(word.to_string()).or_insert(next);
            }
        }
        BagOfWordsEmbedder { vocab }
    }

    pub fn dim(&self) -> usize {
        self.vocab.len()
    }

    /// Unit-norm term-count vector; words outside the vocabulary are
    /// ignored. All-unknown text is degenerate.
    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.vocab.len()];
        for word in text.split_whitespace() {
            if let Some(&i) = self.vocab.get(word) {
                v[i] += 1.0;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateEmbedding(
                "text has no in-vocabulary words".into(),
            ));
        }
        Ok(v.into_iter().map(|x| x / norm).collect())
    }
}
