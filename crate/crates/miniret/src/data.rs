//! On-disk data records: corpus documents, chunks, and training triplets,
//! all JSON-lines.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

/// Raw corpus document: {"id", "text", "lang"}.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default = "default_lang")]
    pub lang: String,
}

fn default_lang() -> String {
    "en".to_string()
}

/// A corpus chunk of at most `max_tokens` tokens, id "{doc_id}#{ordinal}".
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub text: String,
    pub token_count: usize,
    pub lang: String,
}

/// Provenance of a training triplet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Sft,
    Sent,
    Qgen,
    Rerank,
    Triplet,
}

impl SourceTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SourceTag::Sft => "sft",
            SourceTag::Sent => "sent",
            SourceTag::Qgen => "qgen",
            SourceTag::Rerank => "rerank",
            SourceTag::Triplet => "triplet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(SourceTag::Sft),
            "sent" => Ok(SourceTag::Sent),
            "qgen" => Ok(SourceTag::Qgen),
            "rerank" => Ok(SourceTag::Rerank),
            "triplet" => Ok(SourceTag::Triplet),
            other => Err(Error::Data(format!("unknown source tag {other:?}"))),
        }
    }
}

/// The unit of contrastive supervision.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingTriplet {
    pub query: String,
    pub positive: String,
    pub negatives: Vec<String>,
    pub source: SourceTag,
    /// Optional retrieval-rank metadata from the mining pipeline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks: Option<serde_json::Map<String, serde_json::Value>>,
}

impl TrainingTriplet {
    pub fn validate(&self) -> Result<()> {
        if self.query.is_empty() || self.positive.is_empty() {
            return Err(Error::Data("triplet with empty query or positive".into()));
        }
        if self.negatives.iter().any(|n| n == &self.positive) {
            return Err(Error::Data(
                "positive text appears in the hard-negative list".into(),
            ));
        }
        if self.negatives.is_empty() && self.source != SourceTag::Sft {
            return Err(Error::Data(format!(
                "{} triplet without hard negatives",
                self.source.as_str()
            )));
        }
        Ok(())
    }
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!(
                "{}:{}: {}",
                path.display(),
                lineno + 1,
                e
            ))
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_triplets(path: &Path) -> Result<Vec<TrainingTriplet>> {
    let triplets: Vec<TrainingTriplet> = read_jsonl(path)?;
    for t in &triplets {
        t.validate()?;
    }
    Ok(triplets)
}
