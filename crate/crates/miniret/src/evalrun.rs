//! End-to-end retrieval evaluation: encode a corpus and query set with a
//! checkpointed encoder, search an exact index, and score nDCG against
//! qrels. The report is deterministic for a fixed (weights, data, config)
//! triple; wall-clock timings travel in a separate struct so reports can
//! be compared byte for byte.

use crate::encoder::{encode, EncoderConfig, Parameters, TokenSequence};
use crate::error::{Error, Result};
use crate::index::ExactIndex;
use crate::metrics::{ndcg_at_k, Qrels, RunLine};
use crate::tokenizer::Tokenize;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default = "default_k")]
    pub k: usize,
    /// Embedding truncation dimension; None keeps the full hidden size.
    #[serde(default)]
    pub target_dim: Option<usize>,
    #[serde(default = "default_tag")]
    pub tag: String,
}

fn default_k() -> usize {
    10
}
fn default_tag() -> String {
    "miniret".to_string()
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            k: default_k(),
            target_dim: None,
            tag: default_tag(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub k: usize,
    pub dim: usize,
    pub num_docs: usize,
    pub num_queries: usize,
    pub mean_ndcg: f64,
    pub per_query: BTreeMap<String, f64>,
    pub evaluated: usize,
    pub all_zero_skipped: Vec<String>,
    pub missing_qrels: Vec<String>,
    /// Inputs longer than the encoder context, truncated before encoding.
    pub truncated_docs: usize,
    pub truncated_queries: usize,
}

pub const EVAL_SCHEMA_VERSION: u32 = 1;

/// Wall-clock seconds per phase. Kept out of [`EvalReport`] on purpose.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalTimings {
    pub encode_docs_secs: f64,
    pub encode_queries_secs: f64,
    pub search_secs: f64,
}

fn encode_text(
    cfg: &EncoderConfig,
    params: &Parameters,
    tok: &dyn Tokenize,
    id: &str,
    text: &str,
    target_dim: Option<usize>,
    truncated: &mut usize,
) -> Result<Vec<f64>> {
    let ids = tok.tokenize(text);
    if ids.is_empty() {
        return Err(Error::Data(format!("{id:?}: no tokens")));
    }
    let seq = TokenSequence::unpadded(ids);
    let (seq, cut) = seq.truncated(cfg.max_positions);
    if cut {
        *truncated += 1;
    }
    let v = encode(cfg, params, &seq, target_dim)?;
    Ok(v.data().to_vec())
}

/// Encode, index, search, and score. Returns the report, the ranked run
/// (one line per hit, ranks from 1), and phase timings.
pub fn run_eval(
    cfg: &EncoderConfig,
    params: &Parameters,
    tok: &dyn Tokenize,
    docs: &[(String, String)],
    queries: &[(String, String)],
    qrels: &Qrels,
    spec: &EvalSpec,
) -> Result<(EvalReport, Vec<RunLine>, EvalTimings)> {
    if spec.k == 0 {
        return Err(Error::Config("eval: k must be >= 1".into()));
    }
    if docs.is_empty() || queries.is_empty() {
        return Err(Error::Data("eval: empty corpus or query set".into()));
    }
    let dim = spec.target_dim.unwrap_or(cfg.hidden_dim);
    if dim == 0 || dim > cfg.hidden_dim {
        return Err(Error::Config(format!(
            "eval: dim {} out of [1, {}]",
            dim, cfg.hidden_dim
        )));
    }

    let mut truncated_docs = 0;
    let t0 = Instant::now();
    let rows = docs
        .iter()
        .map(|(id, text)| {
            Ok((
                id.clone(),
                encode_text(cfg, params, tok, id, text, spec.target_dim, &mut truncated_docs)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let encode_docs_secs = t0.elapsed().as_secs_f64();
    let index = ExactIndex::build(rows)?;

    let mut truncated_queries = 0;
    let t1 = Instant::now();
    let qvecs = queries
        .iter()
        .map(|(qid, text)| {
            Ok((
                qid.clone(),
                encode_text(cfg, params, tok, qid, text, spec.target_dim, &mut truncated_queries)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let encode_queries_secs = t1.elapsed().as_secs_f64();

    let k = spec.k.min(index.len());
    let t2 = Instant::now();
    let mut run = Vec::new();
    let mut ranking: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (qid, qvec) in &qvecs {
        let hits = index.search(qvec, k)?;
        ranking.insert(qid.clone(), hits.iter().map(|(id, _)| id.clone()).collect());
        for (rank, (docid, score)) in hits.into_iter().enumerate() {
            run.push(RunLine {
                qid: qid.clone(),
                docid,
                rank: rank + 1,
                score,
                tag: spec.tag.clone(),
            });
        }
    }
    let search_secs = t2.elapsed().as_secs_f64();

    let ndcg = ndcg_at_k(&ranking, qrels, spec.k)?;
    let report = EvalReport {
        schema_version: EVAL_SCHEMA_VERSION,
        k: spec.k,
        dim,
        num_docs: docs.len(),
        num_queries: queries.len(),
        mean_ndcg: ndcg.mean,
        per_query: ndcg.per_query,
        evaluated: ndcg.evaluated,
        all_zero_skipped: ndcg.all_zero_skipped,
        missing_qrels: ndcg.missing_qrels,
        truncated_docs,
        truncated_queries,
    };
    let timings = EvalTimings {
        encode_docs_secs,
        encode_queries_secs,
        search_secs,
    };
    Ok((report, run, timings))
}
