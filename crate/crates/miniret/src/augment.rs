//! Corpus-grounded augmentation: chunking, sentence cropping, retrieval
//! mining, rerank refinement, synthetic triplet generation, and source
//! mixing.

use crate::data::{Chunk, Document, SourceTag, TrainingTriplet};
use crate::error::{Error, Result};
use crate::index::ExactIndex;
use crate::llm::{self, ChatClient};
use crate::rng::rng_for;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Sentence boundaries: '.', '!', '?' and their fullwidth forms, when
/// followed by whitespace or end of text. Texts without any boundary are
/// one sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    const TERMINATORS: [char; 6] = ['.', '!', '?', '\u{3002}', '\u{FF1F}', '\u{FF01}'];
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    for i in 0..chars.len() {
        if TERMINATORS.contains(&chars[i])
            && (i + 1 == chars.len() || chars[i + 1].is_whitespace())
        {
            let s: String = chars[start..=i].iter().collect();
            let s = s.trim().to_string();
            if !s.is_empty() {
                sentences.push(s);
            }
            start = i + 1;
        }
    }
    if start < chars.len() {
        let tail: String = chars[start..].iter().collect();
        let tail = tail.trim().to_string();
        if !tail.is_empty() {
            sentences.push(tail);
        }
    }
    if sentences.is_empty() {
        vec![text.trim().to_string()]
    } else {
        sentences
    }
}

/// Greedy left-to-right segmentation into chunks of at most `max_tokens`
/// whitespace tokens. Chunk ids are "{doc_id}#{ordinal}". Concatenating
/// the chunks' tokens reproduces the tokenized document exactly; empty
/// documents contribute nothing.
pub fn chunk_corpus(docs: &[Document], max_tokens: usize) -> Result<Vec<Chunk>> {
    if max_tokens < 1 {
        return Err(Error::invalid("chunking: max_tokens must be >= 1"));
    }
    let mut chunks = Vec::new();
    for doc in docs {
        let tokens: Vec<&str> = doc.text.split_whitespace().collect();
        for (ordinal, window) in tokens.chunks(max_tokens).enumerate() {
            chunks.push(Chunk {
                id: format!("{}#{}", doc.id, ordinal),
                text: window.join(" "),
                token_count: window.len(),
                lang: doc.lang.clone(),
            });
        }
    }
    Ok(chunks)
}

/// Contiguous sentence span of a chunk, clamped to its bounds.
pub fn crop_query(chunk_text: &str, start_sentence: usize, num_sentences: usize) -> String {
    let sentences = split_sentences(chunk_text);
    let start = start_sentence.min(sentences.len() - 1);
    let end = (start + num_sentences.max(1)).min(sentences.len());
    sentences[start..end].join(" ")
}

/// Seeded random crop: span length drawn from [1, 3].
pub fn crop_query_random(chunk_text: &str, rng: &mut impl Rng) -> String {
    let sentences = split_sentences(chunk_text);
    let len = rng.gen_range(1..=3usize);
    let start = rng.gen_range(0..sentences.len());
    crop_query(chunk_text, start, len)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Cropped,
    Generated,
}

/// Mining output: positive and hard-negative chunk ids with the retrieval
/// ranks that produced them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MinedExample {
    pub query: String,
    pub kind: QueryKind,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    /// Chunk id -> 1-based rank in the search that mined it.
    pub ranks: BTreeMap<String, usize>,
}

impl MinedExample {
    pub fn validate(&self) -> Result<()> {
        if self.positives.iter().any(|p| self.negatives.contains(p)) {
            return Err(Error::Data(
                "mined example has overlapping positives and negatives".into(),
            ));
        }
        Ok(())
    }
}

/// Top-k mining: positives are ranks [1, m], hard negatives are ranks
/// [k-n, k] inclusive (n + 1 documents). The query's own source chunk is
/// not excluded; it simply lands wherever retrieval puts it.
pub fn mine_from_index<F>(
    query: &str,
    kind: QueryKind,
    index: &ExactIndex,
    encode: F,
    k: usize,
    m: usize,
    n: usize,
) -> Result<MinedExample>
where
    F: Fn(&str) -> Result<Vec<f64>>,
{
    if m < 1 || m >= k.saturating_sub(n) {
        return Err(Error::invalid(format!(
            "mining bands overlap: need 1 <= m < k - n, got k={k} m={m} n={n}"
        )));
    }
    if k > index.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds index size {}",
            index.len()
        )));
    }
    let emb = encode(query)?;
    let hits = index.search(&emb, k)?;
    let ranks: BTreeMap<String, usize> = hits
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.clone(), i + 1))
        .collect();
    let positives: Vec<String> = hits[..m].iter().map(|(id, _)| id.clone()).collect();
    let negatives: Vec<String> = hits[k - n - 1..k].iter().map(|(id, _)| id.clone()).collect();
    let ranks = ranks
        .into_iter()
        .filter(|(id, _)| positives.contains(id) || negatives.contains(id))
        .collect();
    let example = MinedExample {
        query: query.to_string(),
        kind,
        positives,
        negatives,
        ranks,
    };
    example.validate()?;
    Ok(example)
}

/// Refine a top-k candidate list with a reranker permutation: positive is
/// reranked rank 1, negatives are reranked ranks [k-n, k] inclusive.
pub fn rerank_refine(
    query: &str,
    kind: QueryKind,
    candidates: &[(String, String)],
    order: &[usize],
    n: usize,
) -> Result<MinedExample> {
    let k = candidates.len();
    if order.len() != k {
        return Err(Error::invalid("permutation length must match candidates"));
    }
    let mut seen = vec![false; k + 1];
    for &v in order {
        if v < 1 || v > k || seen[v] {
            return Err(Error::invalid("not a permutation of 1..k"));
        }
        seen[v] = true;
    }
    if n + 2 > k {
        return Err(Error::invalid(format!(
            "negative band [k-n, k] must start at rank >= 2, got k={k} n={n}"
        )));
    }
    let id_at = |reranked_rank: usize| candidates[order[reranked_rank - 1] - 1].0.clone();
    let positives = vec![id_at(1)];
    let negatives: Vec<String> = (k - n..=k).map(id_at).collect();
    let mut ranks = BTreeMap::new();
    ranks.insert(id_at(1), 1);
    for (offset, id) in negatives.iter().enumerate() {
        ranks.insert(id.clone(), k - n + offset);
    }
    let example = MinedExample {
        query: query.to_string(),
        kind,
        positives,
        negatives,
        ranks,
    };
    example.validate()?;
    Ok(example)
}

/// One training triplet per (query, positive) pair; the pair's siblings
/// share the negative list. Chunk ids resolve through `texts`.
pub fn mined_to_triplets(
    example: &MinedExample,
    texts: &BTreeMap<String, String>,
    source: SourceTag,
) -> Result<Vec<TrainingTriplet>> {
    let resolve = |id: &String| -> Result<String> {
        texts
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Data(format!("mined chunk id {id:?} not in corpus")))
    };
    let negatives: Vec<String> = example
        .negatives
        .iter()
        .map(resolve)
        .collect::<Result<_>>()?;
    let ranks_json: serde_json::Map<String, serde_json::Value> = example
        .ranks
        .iter()
        .map(|(id, r)| (id.clone(), serde_json::Value::from(*r)))
        .collect();
    example
        .positives
        .iter()
        .map(|pid| {
            let t = TrainingTriplet {
                query: example.query.clone(),
                positive: resolve(pid)?,
                negatives: negatives.clone(),
                source,
                ranks: Some(ranks_json.clone()),
            };
            t.validate()?;
            Ok(t)
        })
        .collect()
}

/// A dropped generation, written to the parse-failure log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParseFailure {
    pub id: String,
    pub raw: String,
    pub reason: String,
}

fn parse_task_reply(reply: &str) -> Option<(String, String)> {
    let task = reply.lines().find_map(|l| l.strip_prefix("task:"))?.trim();
    let query = reply.lines().find_map(|l| l.strip_prefix("query:"))?.trim();
    if task.is_empty() || query.is_empty() {
        return None;
    }
    Some((task.to_string(), query.to_string()))
}

fn parse_gen_reply(reply: &str) -> Option<(String, String)> {
    let pos = reply
        .lines()
        .find_map(|l| l.strip_prefix("positive:"))?
        .trim();
    let neg = reply
        .lines()
        .find_map(|l| l.strip_prefix("negative:"))?
        .trim();
    if pos.is_empty() || neg.is_empty() || pos == neg {
        return None;
    }
    Some((pos.to_string(), neg.to_string()))
}

/// Two-call synthetic generation: brainstorm a task and query, then a
/// positive and one hard negative. A malformed reply is retried once;
/// a second failure drops the example into the failure log. Transport
/// errors propagate.
pub fn gen_synthetic_triplet(
    task_seed: u64,
    client: &dyn ChatClient,
    failures: &mut Vec<ParseFailure>,
) -> Result<Option<TrainingTriplet>> {
    let seed_str = task_seed.to_string();
    let task_prompt = llm::render(llm::TPL_TRIPLET_TASK, &[("seed", &seed_str)])?;
    let mut call = |prompt: &str, what: &str, parse: &dyn Fn(&str) -> Option<(String, String)>| {
        for attempt in 0..2 {
            let reply = client.complete(prompt)?;
            if let Some(parsed) = parse(&reply) {
                return Ok::<_, Error>(Some(parsed));
            }
            if attempt == 1 {
                log::warn!("task {task_seed}: dropped after malformed {what} reply");
                failures.push(ParseFailure {
                    id: format!("triplet-task-{task_seed}"),
                    raw: reply,
                    reason: format!("malformed {what} reply after retry"),
                });
            }
        }
        Ok(None)
    };
    let Some((_task, query)) = call(&task_prompt, "task", &parse_task_reply)? else {
        return Ok(None);
    };
    let gen_prompt = llm::render(llm::TPL_TRIPLET_GEN, &[("query", &query)])?;
    let Some((positive, negative)) = call(&gen_prompt, "generation", &parse_gen_reply)? else {
        return Ok(None);
    };
    let triplet = TrainingTriplet {
        query,
        positive,
        negatives: vec![negative],
        source: SourceTag::Triplet,
        ranks: None,
    };
    triplet.validate()?;
    Ok(Some(triplet))
}

/// Per-source sampling ratios for the mixed training file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    /// Source tag -> positive weight.
    pub ratios: BTreeMap<String, f64>,
    pub total: usize,
    pub seed: u64,
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() {
            return Err(Error::Config("mix: no source ratios".into()));
        }
        if self.ratios.values().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("mix: weights must be positive".into()));
        }
        if self.total < 1 {
            return Err(Error::Config("mix: total must be >= 1".into()));
        }
        Ok(())
    }
}

/// Largest-remainder split of `total` across weights, keys in sorted
/// order and remainder ties broken by earlier key.
pub fn largest_remainder_quotas(weights: &[(String, f64)], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().map(|(_, w)| w).sum();
    let exact: Vec<f64> = weights.iter().map(|(_, w)| w / sum * total as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).expect("finite remainders").then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        quotas[i] += 1;
    }
    quotas
}

fn sample_without_replacement<T: Clone>(items: &[T], count: usize, rng: &mut impl Rng) -> Vec<T> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    let count = count.min(items.len());
    for i in 0..count {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..count].iter().map(|&i| items[i].clone()).collect()
}

/// Seeded mix of per-source shards at the spec's ratios, largest
/// remainder rounding. A source smaller than its quota is taken fully
/// and the shortfall redistributed proportionally among the rest.
pub fn mix_sources(
    shards: &BTreeMap<String, Vec<TrainingTriplet>>,
    spec: &MixSpec,
) -> Result<Vec<TrainingTriplet>> {
    spec.validate()?;
    for source in spec.ratios.keys() {
        if !shards.contains_key(source) {
            return Err(Error::Data(format!("mix: no shard for source {source:?}")));
        }
    }
    let keys: Vec<String> = spec.ratios.keys().cloned().collect();
    let mut alloc: BTreeMap<String, usize> = keys.iter().map(|k| (k.clone(), 0)).collect();
    let mut remaining = spec.total;
    loop {
        let open: Vec<(String, f64)> = keys
            .iter()
            .filter(|k| alloc[*k] < shards[*k].len())
            .map(|k| (k.clone(), spec.ratios[k]))
            .collect();
        if remaining == 0 || open.is_empty() {
            break;
        }
        let quotas = largest_remainder_quotas(&open, remaining);
        let mut progressed = false;
        for ((key, _), quota) in open.iter().zip(quotas) {
            let spare = shards[key].len() - alloc[key];
            let take = quota.min(spare);
            if take > 0 {
                *alloc.get_mut(key).unwrap() += take;
                remaining -= take;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    if remaining > 0 {
        log::warn!("mix: sources exhausted, output is short by {remaining}");
    }

    let mut mixed = Vec::with_capacity(spec.total - remaining);
    for key in &keys {
        let mut rng = rng_for(spec.seed, &format!("mix/{key}"));
        mixed.extend(sample_without_replacement(&shards[key], alloc[key], &mut rng));
    }
    let mut rng = rng_for(spec.seed, "mix/shuffle");
    for i in (1..mixed.len()).rev() {
        mixed.swap(i, rng.gen_range(0..=i));
    }
    Ok(mixed)
}
