//! Seeded synthetic topic world for desk-scale experiments: documents
//! drawn from per-topic word pools, held-out queries with topic-level
//! relevance, a coverage-limited seed training set, and a topic-oracle
//! embedder that stands in for a strong teacher retriever.

use crate::data::{Document, SourceTag, TrainingTriplet};
use crate::error::{Error, Result};
use crate::metrics::Qrels;
use crate::rng::rng_for;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_topics")]
    pub topics: usize,
    #[serde(default = "default_docs_per_topic")]
    pub docs_per_topic: usize,
    /// Distinct words in each topic's pool.
    #[serde(default = "default_pool")]
    pub words_per_topic: usize,
    /// Shared filler words mixed into every document.
    #[serde(default = "default_shared")]
    pub shared_words: usize,
    #[serde(default = "default_doc_len")]
    pub doc_len: usize,
    #[serde(default = "default_queries_per_topic")]
    pub queries_per_topic: usize,
    pub seed: u64,
}

fn default_topics() -> usize {
    20
}
fn default_docs_per_topic() -> usize {
    10
}
fn default_pool() -> usize {
    12
}
fn default_shared() -> usize {
    30
}
fn default_doc_len() -> usize {
    40
}
fn default_queries_per_topic() -> usize {
    2
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.topics,
            self.docs_per_topic,
            self.words_per_topic,
            self.shared_words,
            self.doc_len,
            self.queries_per_topic,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Config("synth: all counts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthWorld {
    pub docs: Vec<Document>,
    /// (query id, text), grouped by topic in id order.
    pub queries: Vec<(String, String)>,
    /// Every document of a query's topic is relevant with grade 1.
    pub qrels: Qrels,
    pub topics: usize,
}

fn topic_word(topic: usize, w: usize) -> String {
    format!("t{topic}w{w}")
}

/// Topic index of a word, if it is a topic word.
pub fn parse_topic_word(word: &str) -> Option<usize> {
    let rest = word.strip_prefix('t')?;
    let (num, tail) = rest.split_at(rest.find('w')?);
    if tail.len() < 2 || !tail[1..].bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    num.parse().ok()
}

/// Every document mixes its own topic's words (majority) with shared
/// filler, with a sentence boundary every few words so cropping works.
pub fn gen_synth_world(spec: &SynthSpec) -> Result<SynthWorld> {
    spec.validate()?;
    let mut docs = Vec::new();
    let mut queries = Vec::new();
    let mut qrels = Qrels::default();
    for topic in 0..spec.topics {
        let doc_ids: Vec<String> = (0..spec.docs_per_topic)
            .map(|j| format!("t{topic:02}doc{j:02}"))
            .collect();
        for (j, id) in doc_ids.iter().enumerate() {
            let mut rng = rng_for(spec.seed, &format!("synth/doc/{topic}/{j}"));
            let mut words = Vec::with_capacity(spec.doc_len);
            for i in 0..spec.doc_len {
                let mut word = if rng.gen_bool(0.75) {
                    topic_word(topic, rng.gen_range(0..spec.words_per_topic))
                } else {
                    format!("common{:02}", rng.gen_range(0..spec.shared_words))
                };
                if (i + 1) % 8 == 0 || i + 1 == spec.doc_len {
                    word.push('.');
                }
                words.push(word);
            }
            docs.push(Document {
                id: id.clone(),
                text: words.join(" "),
                lang: "en".into(),
            });
        }
        for q in 0..spec.queries_per_topic {
            let mut rng = rng_for(spec.seed, &format!("synth/query/{topic}/{q}"));
            let len = rng.gen_range(3..=5usize);
            let text: Vec<String> = (0..len)
                .map(|_| topic_word(topic, rng.gen_range(0..spec.words_per_topic)))
                .collect();
            let qid = format!("t{topic:02}q{q}");
            for id in &doc_ids {
                qrels.add(&qid, id, 1);
            }
            queries.push((qid, text.join(" ")));
        }
    }
    Ok(SynthWorld {
        docs,
        queries,
        qrels,
        topics: spec.topics,
    })
}

/// Teacher retriever stand-in: embeds text as its normalized topic-word
/// histogram, one coordinate per topic. Perfect topic separation by
/// construction; text without topic words is degenerate.
pub fn topic_oracle_embed(text: &str, topics: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; topics];
    for word in text.split_whitespace() {
        let clean = word.trim_matches(|c: char| c.is_ascii_punctuation());
        if let Some(t) = parse_topic_word(clean) {
            if t < topics {
                v[t] += 1.0;
            }
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::DegenerateEmbedding(
            "text has no topic words".into(),
        ));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

/// Seed training pairs covering only the first `coverage_topics` topics,
/// the way a small supervised set covers a fraction of a corpus. One
/// (query, positive) pair per document, no negatives.
pub fn seed_training_pairs(
    world: &SynthWorld,
    coverage_topics: usize,
    seed: u64,
) -> Result<Vec<TrainingTriplet>> {
    if coverage_topics == 0 || coverage_topics > world.topics {
        return Err(Error::invalid(format!(
            "coverage {} outside [1, {}]",
            coverage_topics, world.topics
        )));
    }
    let mut out = Vec::new();
    for doc in &world.docs {
        let topic = doc
            .id
            .strip_prefix('t')
            .and_then(|s| s[..2].parse::<usize>().ok())
            .ok_or_else(|| Error::Data(format!("doc id {:?} has no topic", doc.id)))?;
        if topic >= coverage_topics {
            continue;
        }
        let mut rng = rng_for(seed, &format!("sft/{}", doc.id));
        let words: Vec<&str> = doc
            .text
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()))
            .filter(|w| parse_topic_word(w).is_some())
            .collect();
        if words.is_empty() {
            continue;
        }
        let len = rng.gen_range(2..=4usize).min(words.len());
        let start = rng.gen_range(0..=words.len() - len);
        let t = TrainingTriplet {
            query: words[start..start + len].join(" "),
            positive: doc.text.clone(),
            negatives: vec![],
            source: SourceTag::Sft,
            ranks: None,
        };
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}
