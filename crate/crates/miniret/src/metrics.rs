//! nDCG@k with trec-eval gain/discount conventions, qrels TSV files, and
//! six-column run files.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

/// Relevance judgments: query id -> doc id -> grade >= 0.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels {
    pub by_query: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn add(&mut self, qid: &str, docid: &str, grade: u32) {
        self.by_query
            .entry(qid.to_string())
            .or_default()
            .insert(docid.to_string(), grade);
    }

    pub fn grade(&self, qid: &str, docid: &str) -> u32 {
        self.by_query
            .get(qid)
            .and_then(|m| m.get(docid))
            .copied()
            .unwrap_or(0)
    }

    /// TSV rows "query_id<TAB>doc_id<TAB>relevance".
    pub fn read_tsv(path: &Path) -> Result<Self> {
        let file =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut qrels = Qrels::default();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Data(format!(
                    "{}:{}: expected 3 tab-separated fields, got {}",
                    path.display(),
                    lineno + 1,
                    fields.len()
                )));
            }
            let grade: u32 = fields[2].trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}:{}: relevance {:?} is not a nonnegative integer",
                    path.display(),
                    lineno + 1,
                    fields[2]
                ))
            })?;
            qrels.add(fields[0], fields[1], grade);
        }
        Ok(qrels)
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        for (qid, docs) in &self.by_query {
            for (docid, grade) in docs {
                writeln!(w, "{qid}\t{docid}\t{grade}")
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// One line of a TREC run file: "qid Q0 docid rank score tag".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLine {
    pub qid: String,
    pub docid: String,
    pub rank: usize,
    pub score: f64,
    pub tag: String,
}

pub fn write_run(path: &Path, lines: &[RunLine]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        writeln!(w, "{} Q0 {} {} {} {}", l.qid, l.docid, l.rank, l.score, l.tag)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_run(path: &Path) -> Result<Vec<RunLine>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 || f[1] != "Q0" {
            return Err(Error::Data(format!(
                "{}:{}: not a six-column run line",
                path.display(),
                lineno + 1
            )));
        }
        out.push(RunLine {
            qid: f[0].to_string(),
            docid: f[2].to_string(),
            rank: f[3]
                .parse()
                .map_err(|_| Error::Data(format!("{}:{}: bad rank", path.display(), lineno + 1)))?,
            score: f[4]
                .parse()
                .map_err(|_| Error::Data(format!("{}:{}: bad score", path.display(), lineno + 1)))?,
            tag: f[5].to_string(),
        });
    }
    Ok(out)
}

/// Group run lines into per-query ranked id lists, ordered by rank.
pub fn run_to_ranking(lines: &[RunLine]) -> BTreeMap<String, Vec<String>> {
    let mut grouped: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
    for l in lines {
        grouped
            .entry(l.qid.clone())
            .or_default()
            .push((l.rank, l.docid.clone()));
    }
    grouped
        .into_iter()
        .map(|(qid, mut v)| {
            v.sort_by_key(|(r, _)| *r);
            (qid, v.into_iter().map(|(_, d)| d).collect())
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NdcgOutcome {
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Queries scored into the mean.
    pub evaluated: usize,
    /// Judged queries whose grades are all zero: excluded, counted.
    pub all_zero_skipped: Vec<String>,
    /// Ranked queries absent from the qrels: excluded, reported.
    pub missing_qrels: Vec<String>,
}

/// nDCG@k: gain 2^rel - 1, discount log2(rank + 1); IDCG from the ideal
/// ordering of all judged docs for the query.
pub fn ndcg_at_k(
    ranking: &BTreeMap<String, Vec<String>>,
    qrels: &Qrels,
    k: usize,
) -> Result<NdcgOutcome> {
    if k < 1 {
        return Err(Error::invalid("ndcg: k must be >= 1"));
    }
    let gain = |rel: u32| (2f64.powi(rel as i32)) - 1.0;
    let mut per_query = BTreeMap::new();
    let mut all_zero_skipped = Vec::new();
    let mut missing_qrels = Vec::new();
    for (qid, ranked) in ranking {
        let Some(judged) = qrels.by_query.get(qid) else {
            missing_qrels.push(qid.clone());
            continue;
        };
        let mut grades: Vec<u32> = judged.values().copied().collect();
        grades.sort_unstable_by(|a, b| b.cmp(a));
        if grades.first().copied().unwrap_or(0) == 0 {
            all_zero_skipped.push(qid.clone());
            continue;
        }
        let dcg: f64 = ranked
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, d)| gain(qrels.grade(qid, d)) / ((i + 2) as f64).log2())
            .sum();
        let idcg: f64 = grades
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| gain(g) / ((i + 2) as f64).log2())
            .sum();
        per_query.insert(qid.clone(), dcg / idcg);
    }
    let evaluated = per_query.len();
    let mean = if evaluated == 0 {
        0.0
    } else {
        per_query.values().sum::<f64>() / evaluated as f64
    };
    Ok(NdcgOutcome {
        per_query,
        mean,
        evaluated,
        all_zero_skipped,
        missing_qrels,
    })
}
