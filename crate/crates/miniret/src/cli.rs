//! Command-line pipelines: chunk -> augment -> mix -> train / prune ->
//! encode -> index -> search -> eval, plus the needle generator and the
//! gradient checker.
//!
//! One --seed drives every module rng through tagged derivation, so a
//! whole pipeline reruns byte-identically. Every command writes a
//! manifest JSON recording the resolved settings hash, input and output
//! file hashes, and the shipped prompt-template hashes. Settings come
//! from an optional JSON config file; command-line flags win.
//!
//! Exit codes: 0 success, 2 config error, 3 input data error, 4 external
//! client failure, 1 internal error.

use crate::augment::{
    chunk_corpus, crop_query_random, gen_synthetic_triplet, mine_from_index, mined_to_triplets,
    mix_sources, rerank_refine, MixSpec, ParseFailure, QueryKind,
};
use crate::data::{read_jsonl, read_triplets, write_jsonl, Chunk, Document, SourceTag, TrainingTriplet};
use crate::encoder::{
    encode as encode_text_seq, load_checkpoint, save_checkpoint, AttentionMode, CheckpointPrecision,
    EncoderConfig, Parameters, ParamVars, Pooling, TokenSequence,
};
use crate::error::{Error, Result};
use crate::evalrun::{run_eval, EvalSpec};
use crate::index::ExactIndex;
use crate::llm::{self, generate_query, listwise_rerank, ChatClient, ClientConfig, HttpClient, MockClient};
use crate::metrics::{write_run, Qrels, RunLine};
use crate::needle::{gen_needle_corpus, BagOfWordsEmbedder, NeedleTaskSpec};
use crate::objective::{batch_loss_on_tape, fit, FitSpec, LossConfig};
use crate::pruning::{
    continued_pretrain, prune_step, snap_architecture, LagrangeState, MaskSet, PruneRates,
    PruneTarget,
};
use crate::rng::{derive_seed, rng_for};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{build_vocab, Tokenize, WordTokenizer};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------
// Argument surface

#[derive(Parser)]
#[command(
    name = "miniret",
    version,
    about = "Train, prune, and evaluate a miniature dense retriever"
)]
pub struct Cli {
    /// JSON config file; flags override config values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; all module rngs derive from it
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker cap. This build runs single-threaded; the value is
    /// validated and recorded so configs stay portable.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Split a JSON-lines corpus into bounded-size chunks
    Chunk(ChunkArgs),
    /// Mine training triplets from a chunk file
    Augment(AugmentArgs),
    /// Combine triplet shards by ratio into one training set
    Mix(MixArgs),
    /// Contrastively train a retriever checkpoint
    Train(TrainArgs),
    /// Learn structured pruning masks against a target architecture
    Prune(PruneArgs),
    /// Discretize learned masks into a dense smaller checkpoint
    Snap(SnapArgs),
    /// Continue language-model training of a checkpoint
    Pretrain(PretrainArgs),
    /// Embed texts with a checkpoint
    Encode(EncodeArgs),
    /// Build an exact search index from embeddings
    Index(IndexArgs),
    /// Query an index with embedded queries, write a run file
    Search(SearchArgs),
    /// End-to-end retrieval evaluation with nDCG@k
    Eval(EvalArgs),
    /// Generate the long-context needle benchmark
    Needle(NeedleArgs),
    /// Verify analytic gradients against central differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct ChunkArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_tokens: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    /// Cropped-sentence queries mined against the lexical teacher
    Sent,
    /// Client-generated queries mined against the lexical teacher
    Qgen,
    /// Cropped queries refined by client listwise reranking
    Rerank,
    /// Fully synthetic (task, query, positive, negative) generation
    Triplet,
}

#[derive(Args)]
pub struct AugmentArgs {
    #[arg(long, value_enum)]
    pub mode: AugmentMode,
    #[arg(long)]
    pub chunks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Parse-failure log; defaults to <out>.failures.jsonl
    #[arg(long)]
    pub failures: Option<PathBuf>,
    /// Retrieval depth for mining
    #[arg(long)]
    pub k: Option<usize>,
    /// Positive band size (ranks 1..=m)
    #[arg(long)]
    pub m: Option<usize>,
    /// Negative band size (ranks k-n..=k)
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub rerank_k: Option<usize>,
    #[arg(long)]
    pub rerank_n: Option<usize>,
    /// Synthetic triplet count (triplet mode)
    #[arg(long)]
    pub count: Option<usize>,
    /// Cap on processed chunks; all by default
    #[arg(long)]
    pub limit: Option<usize>,
    /// Chat endpoint, e.g. http://host:port; the in-process mock when absent
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub max_retries: Option<usize>,
    #[arg(long)]
    pub timeout_secs: Option<f64>,
}

#[derive(Args)]
pub struct MixArgs {
    /// Repeatable source=path pair, e.g. --shard sent=sent.jsonl
    #[arg(long = "shard")]
    pub shards: Vec<String>,
    /// Repeatable source=weight pair, e.g. --ratio sent=2
    #[arg(long = "ratio")]
    pub ratios: Vec<String>,
    #[arg(long)]
    pub total: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub triplets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint instead of fresh init
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Vocabulary file (required with --init); built from the triplets otherwise
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Vocabulary output path; defaults to <out>.vocab.txt
    #[arg(long)]
    pub vocab_out: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub intermediate: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    #[arg(long)]
    pub attention: Option<AttentionFlag>,
    #[arg(long)]
    pub pooling: Option<PoolingFlag>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// InfoNCE temperature
    #[arg(long)]
    pub tau: Option<f64>,
    /// Comma-separated ascending truncation dims ending at the hidden size
    #[arg(long)]
    pub dims: Option<String>,
    #[arg(long)]
    pub hard_negatives: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionFlag {
    Bidirectional,
    Unidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingFlag {
    Mean,
    Eos,
}

#[derive(Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub init: PathBuf,
    /// Language-model corpus, JSON-lines documents
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary file; built from the corpus when absent
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Mask/multiplier state output; defaults to <out>.masks.json
    #[arg(long)]
    pub out_masks: Option<PathBuf>,
    #[arg(long)]
    pub target_layers: Option<usize>,
    #[arg(long)]
    pub target_hidden: Option<usize>,
    #[arg(long)]
    pub target_heads: Option<usize>,
    #[arg(long)]
    pub target_intermediate: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub init_log_alpha: Option<f64>,
    #[arg(long)]
    pub lr_theta: Option<f64>,
    #[arg(long)]
    pub lr_alpha: Option<f64>,
    #[arg(long)]
    pub eta_lambda: Option<f64>,
    #[arg(long)]
    pub eta_phi: Option<f64>,
}

#[derive(Args)]
pub struct SnapArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Mask/multiplier state from `prune`
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// JSON-lines documents to embed
    #[arg(long)]
    pub input: PathBuf,
    /// JSON-lines {"id", "vector"} output
    #[arg(long)]
    pub out: PathBuf,
    /// Truncation dimension; full hidden size by default
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Embedded queries, JSON-lines {"id", "vector"}
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// JSON-lines {"id", "text"} queries
    #[arg(long)]
    pub queries: PathBuf,
    /// TSV qid<TAB>docid<TAB>relevance
    #[arg(long)]
    pub qrels: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub tag: Option<String>,
    /// Report JSON output
    #[arg(long)]
    pub out: PathBuf,
    /// Optional TREC run file output
    #[arg(long)]
    pub run: Option<PathBuf>,
}

#[derive(Args)]
pub struct NeedleArgs {
    /// Comma-separated ascending context lengths, e.g. 256,512,1024
    #[arg(long)]
    pub lengths: Option<String>,
    #[arg(long)]
    pub tasks_per_length: Option<usize>,
    #[arg(long)]
    pub filler_vocab: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Coordinates probed per tensor
    #[arg(long)]
    pub coords: Option<usize>,
    /// Random evaluation points
    #[arg(long)]
    pub points: Option<usize>,
}

// ---------------------------------------------------------------------
// Config file

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    schema_version: Option<u32>,
    seed: Option<u64>,
    threads: Option<usize>,
    chunk: ChunkSection,
    augment: AugmentSection,
    mix: MixSection,
    train: TrainSection,
    prune: PruneSection,
    pretrain: PretrainSection,
    encode: EncodeSection,
    search: SearchSection,
    eval: EvalSection,
    needle: NeedleSection,
    gradcheck: GradcheckSection,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ChunkSection {
    max_tokens: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AugmentSection {
    k: Option<usize>,
    m: Option<usize>,
    n: Option<usize>,
    rerank_k: Option<usize>,
    rerank_n: Option<usize>,
    count: Option<usize>,
    limit: Option<usize>,
    endpoint: Option<String>,
    model: Option<String>,
    max_retries: Option<usize>,
    timeout_secs: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct MixSection {
    total: Option<usize>,
    ratios: Option<BTreeMap<String, f64>>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    layers: Option<usize>,
    hidden: Option<usize>,
    heads: Option<usize>,
    intermediate: Option<usize>,
    vocab_size: Option<usize>,
    max_positions: Option<usize>,
    attention: Option<AttentionFlag>,
    pooling: Option<PoolingFlag>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    tau: Option<f64>,
    dims: Option<Vec<usize>>,
    hard_negatives: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PruneSection {
    target_layers: Option<usize>,
    target_hidden: Option<usize>,
    target_heads: Option<usize>,
    target_intermediate: Option<usize>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    init_log_alpha: Option<f64>,
    lr_theta: Option<f64>,
    lr_alpha: Option<f64>,
    eta_lambda: Option<f64>,
    eta_phi: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PretrainSection {
    steps: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EncodeSection {
    dim: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SearchSection {
    k: Option<usize>,
    tag: Option<String>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalSection {
    k: Option<usize>,
    dim: Option<usize>,
    tag: Option<String>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct NeedleSection {
    lengths: Option<Vec<usize>>,
    tasks_per_length: Option<usize>,
    filler_vocab: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GradcheckSection {
    coords: Option<usize>,
    points: Option<usize>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

// ---------------------------------------------------------------------
// Manifest

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    /// Fully resolved settings after config-file and flag merging.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub template_hashes: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

fn hash_paths(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

struct RunContext {
    command: String,
    seed: u64,
    threads: usize,
}

impl RunContext {
    fn write_manifest(
        &self,
        manifest_path: &Path,
        resolved: serde_json::Value,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> Result<()> {
        let config_json = serde_json::to_string(&resolved)?;
        let mut h = Sha256::new();
        h.update(config_json.as_bytes());
        let config_hash = format!("{:x}", h.finalize());
        log::info!("{}: config hash {config_hash}", self.command);
        let manifest = Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: self.command.clone(),
            seed: self.seed,
            threads: self.threads,
            config: resolved,
            config_hash,
            inputs: hash_paths(inputs)?,
            outputs: hash_paths(outputs)?,
            template_hashes: llm::template_hashes()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(manifest_path, json)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))
    }
}

fn manifest_path_for(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.json", out.display()))
}

// ---------------------------------------------------------------------
// Entry point

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::Client(_) => 4,
        _ => 1,
    }
}

/// Parse argv, run, and return the process exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = load_file_config(cli.config.as_deref())?;
    if let Some(v) = file.schema_version {
        if v != 1 {
            return Err(Error::Config(format!("unsupported config schema {v}")));
        }
    }
    let seed = pick(cli.seed, file.seed, 0);
    let threads = pick(cli.threads, file.threads, 1);
    if threads == 0 {
        return Err(Error::Config("threads must be >= 1".into()));
    }
    let ctx = |name: &str| RunContext {
        command: name.to_string(),
        seed,
        threads,
    };
    match cli.command {
        Command::Chunk(a) => cmd_chunk(&ctx("chunk"), a, &file.chunk),
        Command::Augment(a) => cmd_augment(&ctx("augment"), a, &file.augment),
        Command::Mix(a) => cmd_mix(&ctx("mix"), a, &file.mix),
        Command::Train(a) => cmd_train(&ctx("train"), a, &file.train),
        Command::Prune(a) => cmd_prune(&ctx("prune"), a, &file.prune),
        Command::Snap(a) => cmd_snap(&ctx("snap"), a),
        Command::Pretrain(a) => cmd_pretrain(&ctx("pretrain"), a, &file.pretrain),
        Command::Encode(a) => cmd_encode(&ctx("encode"), a, &file.encode),
        Command::Index(a) => cmd_index(&ctx("index"), a),
        Command::Search(a) => cmd_search(&ctx("search"), a, &file.search),
        Command::Eval(a) => cmd_eval(&ctx("eval"), a, &file.eval),
        Command::Needle(a) => cmd_needle(&ctx("needle"), a, &file.needle),
        Command::Gradcheck(a) => cmd_gradcheck(&ctx("gradcheck"), a, &file.gradcheck),
    }
}

// ---------------------------------------------------------------------
// Shared helpers

fn read_documents(path: &Path) -> Result<Vec<Document>> {
    let docs: Vec<Document> = read_jsonl(path)?;
    if docs.is_empty() {
        return Err(Error::Data(format!("{}: no documents", path.display())));
    }
    Ok(docs)
}

fn load_tokenizer(vocab: &Path, vocab_size: usize) -> Result<WordTokenizer> {
    let text =
        std::fs::read_to_string(vocab).map_err(|e| Error::io(vocab.display().to_string(), e))?;
    let words: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
    if words.len() >= vocab_size {
        return Err(Error::Config(format!(
            "vocabulary of {} words leaves no unknown-word buckets in a vocab size of {}",
            words.len(),
            vocab_size
        )));
    }
    Ok(WordTokenizer::new(&words, vocab_size - words.len()))
}

fn build_and_save_vocab(texts: &[&str], vocab_size: usize, path: &Path) -> Result<WordTokenizer> {
    let unk = (vocab_size / 8).max(1);
    if unk >= vocab_size {
        return Err(Error::Config(format!("vocab size {vocab_size} too small")));
    }
    let words = build_vocab(texts.iter().copied(), vocab_size - unk);
    std::fs::write(path, words.join("\n") + "\n")
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(WordTokenizer::new(&words, vocab_size - words.len()))
}

fn corpus_sequences(
    docs: &[Document],
    tok: &dyn Tokenize,
    cfg: &EncoderConfig,
) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::with_capacity(docs.len());
    for d in docs {
        let ids = tok.tokenize(&d.text);
        if ids.is_empty() {
            return Err(Error::Data(format!("document {:?} tokenizes to nothing", d.id)));
        }
        let (seq, _) = TokenSequence::unpadded(ids).truncated(cfg.max_positions);
        out.push(seq);
    }
    Ok(out)
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad dimension {p:?}")))
        })
        .collect()
}

fn parse_kv_pairs(pairs: &[String], what: &str) -> Result<Vec<(String, String)>> {
    pairs
        .iter()
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{what} {p:?} is not key=value")))?;
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}

/// JSON-lines embedding record.
#[derive(Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f64>,
}

// ---------------------------------------------------------------------
// Commands

fn cmd_chunk(ctx: &RunContext, a: ChunkArgs, sec: &ChunkSection) -> Result<()> {
    let max_tokens = pick(a.max_tokens, sec.max_tokens, 256);
    let docs = read_documents(&a.corpus)?;
    let chunks = chunk_corpus(&docs, max_tokens)?;
    write_jsonl(&a.out, &chunks)?;
    println!("chunk: {} documents -> {} chunks", docs.len(), chunks.len());
    ctx.write_manifest(
        &manifest_path_for(&a.out),
        serde_json::json!({ "max_tokens": max_tokens }),
        &[&a.corpus],
        &[&a.out],
    )
}

fn make_client(
    seed: u64,
    endpoint: Option<&str>,
    model: Option<&str>,
    max_retries: Option<usize>,
    timeout_secs: Option<f64>,
) -> Result<Box<dyn ChatClient>> {
    match endpoint {
        None => Ok(Box::new(MockClient {
            seed: derive_seed(seed, "client"),
        })),
        Some(ep) => {
            let mut cfg = ClientConfig::mock(seed);
            cfg.endpoint = ep.to_string();
            cfg.model = model.unwrap_or("default").to_string();
            if let Some(r) = max_retries {
                cfg.max_retries = r;
            }
            if let Some(t) = timeout_secs {
                cfg.timeout_secs = t;
            }
            Ok(Box::new(HttpClient::new(cfg)?))
        }
    }
}

fn cmd_augment(ctx: &RunContext, a: AugmentArgs, sec: &AugmentSection) -> Result<()> {
    let k = pick(a.k, sec.k, 50);
    let m = pick(a.m, sec.m, 10);
    let n = pick(a.n, sec.n, 20);
    let rerank_k = pick(a.rerank_k, sec.rerank_k, 20);
    let rerank_n = pick(a.rerank_n, sec.rerank_n, 10);
    let count = pick(a.count, sec.count, 32);
    let limit = a.limit.or(sec.limit);
    let endpoint = a.endpoint.or_else(|| sec.endpoint.clone());
    let model = a.model.or_else(|| sec.model.clone());
    let failures_path = a
        .failures
        .unwrap_or_else(|| PathBuf::from(format!("{}.failures.jsonl", a.out.display())));
    let client = make_client(
        ctx.seed,
        endpoint.as_deref(),
        model.as_deref(),
        a.max_retries.or(sec.max_retries),
        a.timeout_secs.or(sec.timeout_secs),
    )?;

    let chunks: Vec<Chunk> = read_jsonl(&a.chunks)?;
    if chunks.is_empty() {
        return Err(Error::Data(format!("{}: no chunks", a.chunks.display())));
    }
    let mut chunks = chunks;
    chunks.sort_by(|x, y| x.id.cmp(&y.id));
    let texts: BTreeMap<String, String> = chunks
        .iter()
        .map(|c| (c.id.clone(), c.text.clone()))
        .collect();
    let teacher = BagOfWordsEmbedder::build(chunks.iter().map(|c| c.text.as_str()));
    let index = ExactIndex::build(
        chunks
            .iter()
            .map(|c| Ok((c.id.clone(), teacher.embed(&c.text)?)))
            .collect::<Result<_>>()?,
    )?;
    let embed = |t: &str| teacher.embed(t);

    let mut triplets: Vec<TrainingTriplet> = Vec::new();
    let mut failures: Vec<ParseFailure> = Vec::new();
    let selected: Vec<&Chunk> = chunks.iter().take(limit.unwrap_or(usize::MAX)).collect();

    match a.mode {
        AugmentMode::Sent => {
            for chunk in &selected {
                let mut rng = rng_for(ctx.seed, &format!("augment/sent/{}", chunk.id));
                let query = crop_query_random(&chunk.text, &mut rng);
                let ex = mine_from_index(&query, QueryKind::Cropped, &index, embed, k, m, n)?;
                triplets.extend(mined_to_triplets(&ex, &texts, SourceTag::Sent)?);
            }
        }
        AugmentMode::Qgen => {
            for chunk in &selected {
                let query = match generate_query(client.as_ref(), &chunk.text) {
                    Ok(q) => q,
                    Err(Error::Client(reason)) => {
                        failures.push(ParseFailure {
                            id: chunk.id.clone(),
                            raw: String::new(),
                            reason,
                        });
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let ex = mine_from_index(&query, QueryKind::Generated, &index, embed, k, m, n)?;
                triplets.extend(mined_to_triplets(&ex, &texts, SourceTag::Qgen)?);
            }
        }
        AugmentMode::Rerank => {
            for chunk in &selected {
                let mut rng = rng_for(ctx.seed, &format!("augment/rerank/{}", chunk.id));
                let query = crop_query_random(&chunk.text, &mut rng);
                let hits = index.search(&embed(&query)?, rerank_k)?;
                let candidates: Vec<(String, String)> = hits
                    .iter()
                    .map(|(id, _)| (id.clone(), texts[id].clone()))
                    .collect();
                let cand_texts: Vec<String> =
                    candidates.iter().map(|(_, t)| t.clone()).collect();
                let parsed = match listwise_rerank(client.as_ref(), &query, &cand_texts) {
                    Ok(p) => p,
                    Err(Error::Client(reason)) if reason.contains("unrepairable") => {
                        failures.push(ParseFailure {
                            id: chunk.id.clone(),
                            raw: String::new(),
                            reason,
                        });
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let ex = rerank_refine(
                    &query,
                    QueryKind::Cropped,
                    &candidates,
                    &parsed.order,
                    rerank_n,
                )?;
                triplets.extend(mined_to_triplets(&ex, &texts, SourceTag::Rerank)?);
            }
        }
        AugmentMode::Triplet => {
            for i in 0..count {
                let task_seed = derive_seed(ctx.seed, &format!("augment/triplet/{i}"));
                if let Some(t) = gen_synthetic_triplet(task_seed, client.as_ref(), &mut failures)? {
                    triplets.push(t);
                }
            }
        }
    }

    write_jsonl(&a.out, &triplets)?;
    write_jsonl(&failures_path, &failures)?;
    println!(
        "augment[{:?}]: {} triplets, {} failures",
        a.mode,
        triplets.len(),
        failures.len()
    );
    ctx.write_manifest(
        &manifest_path_for(&a.out),
        serde_json::json!({
            "mode": a.mode, "k": k, "m": m, "n": n,
            "rerank_k": rerank_k, "rerank_n": rerank_n,
            "count": count, "limit": limit,
            "endpoint": endpoint, "model": model,
        }),
        &[&a.chunks],
        &[&a.out, &failures_path],
    )
}

fn cmd_mix(ctx: &RunContext, a: MixArgs, sec: &MixSection) -> Result<()> {
    let shard_paths = parse_kv_pairs(&a.shards, "shard")?;
    if shard_paths.is_empty() {
        return Err(Error::Config("mix: no --shard source=path given".into()));
    }
    let mut ratios: BTreeMap<String, f64> = sec.ratios.clone().unwrap_or_default();
    for (k, v) in parse_kv_pairs(&a.ratios, "ratio")? {
        let w: f64 = v
            .parse()
            .map_err(|_| Error::Config(format!("ratio weight {v:?} is not a number")))?;
        ratios.insert(k, w);
    }
    let total = pick(a.total, sec.total, 0);
    if total == 0 {
        return Err(Error::Config("mix: total must be >= 1".into()));
    }
    let mut shards: BTreeMap<String, Vec<TrainingTriplet>> = BTreeMap::new();
    let mut input_paths: Vec<PathBuf> = Vec::new();
    for (source, path) in &shard_paths {
        let path = PathBuf::from(path);
        shards.insert(source.clone(), read_triplets(&path)?);
        input_paths.push(path);
    }
    let spec = MixSpec {
        ratios: ratios.clone(),
        total,
        seed: ctx.seed,
    };
    let mixed = mix_sources(&shards, &spec)?;
    write_jsonl(&a.out, &mixed)?;
    println!("mix: {} triplets from {} shards", mixed.len(), shards.len());
    let inputs: Vec<&Path> = input_paths.iter().map(|p| p.as_path()).collect();
    ctx.write_manifest(
        &manifest_path_for(&a.out),
        serde_json::json!({ "ratios": ratios, "total": total }),
        &inputs,
        &[&a.out],
    )
}

fn cmd_train(ctx: &RunContext, a: TrainArgs, sec: &TrainSection) -> Result<()> {
    let triplets = read_triplets(&a.triplets)?;
    let steps = pick(a.steps, sec.steps, 100);
    let batch_size = pick(a.batch_size, sec.batch_size, 4);
    let lr = pick(a.lr, sec.lr, 1e-3);
    let tau = pick(a.tau, sec.tau, 0.05);
    let hard_negatives = pick(a.hard_negatives, sec.hard_negatives, 1);

    let vocab_out = a
        .vocab_out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.vocab.txt", a.out.display())));
    let mut inputs: Vec<PathBuf> = vec![a.triplets.clone()];
    let mut outputs: Vec<PathBuf> = vec![a.out.clone()];

    let (cfg, mut params, tok) = match &a.init {
        Some(init) => {
            let (cfg, params) = load_checkpoint(init)?;
            let vocab = a.vocab.clone().ok_or_else(|| {
                Error::Config("train --init requires --vocab for the checkpoint".into())
            })?;
            let tok = load_tokenizer(&vocab, cfg.vocab_size)?;
            inputs.push(init.clone());
            inputs.push(vocab);
            (cfg, params, tok)
        }
        None => {
            let cfg = EncoderConfig {
                num_layers: pick(a.layers, sec.layers, 2),
                hidden_dim: pick(a.hidden, sec.hidden, 32),
                num_heads: pick(a.heads, sec.heads, 2),
                intermediate_dim: pick(a.intermediate, sec.intermediate, 64),
                vocab_size: pick(a.vocab_size, sec.vocab_size, 256),
                max_positions: pick(a.max_positions, sec.max_positions, 64),
                rope_theta: 10_000.0,
                attention_mode: match pick(
                    a.attention,
                    sec.attention,
                    AttentionFlag::Bidirectional,
                ) {
                    AttentionFlag::Bidirectional => AttentionMode::Bidirectional,
                    AttentionFlag::Unidirectional => AttentionMode::Unidirectional,
                },
                pooling: match pick(a.pooling, sec.pooling, PoolingFlag::Mean) {
                    PoolingFlag::Mean => Pooling::Mean,
                    PoolingFlag::Eos => Pooling::Eos,
                },
            };
            cfg.validate()?;
            let all_texts: Vec<&str> = triplets
                .iter()
                .flat_map(|t| {
                    std::iter::once(t.query.as_str())
                        .chain(std::iter::once(t.positive.as_str()))
                        .chain(t.negatives.iter().map(|n| n.as_str()))
                })
                .collect();
            let tok = build_and_save_vocab(&all_texts, cfg.vocab_size, &vocab_out)?;
            outputs.push(vocab_out.clone());
            let params = Parameters::init(&cfg, &mut rng_for(ctx.seed, "train/init"));
            (cfg, params, tok)
        }
    };

    let dims = match a.dims.as_deref() {
        Some(s) => parse_dims(s)?,
        None => sec.dims.clone().unwrap_or_else(|| vec![cfg.hidden_dim]),
    };
    let loss_cfg = LossConfig {
        temperature: tau,
        mrl_dims: dims.clone(),
        mrl_weights: vec![],
        num_hard_negatives: hard_negatives,
    };
    let spec = FitSpec {
        steps,
        batch_size,
        lr,
        seed: derive_seed(ctx.seed, "train"),
    };
    let history = fit(&cfg, &mut params, &tok, &triplets, &loss_cfg, &spec)?;
    save_checkpoint(&a.out, &cfg, &params, CheckpointPrecision::F64)?;
    println!(
        "train: {} steps, loss {:.6} -> {:.6}",
        steps,
        history.first().copied().unwrap_or(f64::NAN),
        history.last().copied().unwrap_or(f64::NAN)
    );
    let input_refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    let output_refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    ctx.write_manifest(
        &manifest_path_for(&a.out),
        serde_json::json!({
            "encoder": cfg, "steps": steps, "batch_size": batch_size,
            "lr": lr, "tau": tau, "dims": dims, "hard_negatives": hard_negatives,
        }),
        &input_refs,
        &output_refs,
    )
}

/// Learned mask state as written by `prune` and read by `snap`.
#[derive(Serialize, Deserialize)]
pub struct PruneState {
    pub schema_version: u32,
    pub target: PruneTarget,
    pub masks: MaskSet,
    pub lagrange: LagrangeState,
}

fn require_unidirectional(cfg: &EncoderConfig, command: &str) -> Result<()> {
    if cfg.attention_mode != AttentionMode::Unidirectional {
        return Err(Error::Data(format!(
            "{command} needs a unidirectional-attention checkpoint for the language-model loss"
        )));
    }
    Ok(())
}

fn cmd_prune(ctx: &RunContext, a: PruneArgs, sec: &PruneSection) -> Result<()> {
    let (cfg, mut params) = load_checkpoint(&a.init)?;
    require_unidirectional(&cfg, "prune")?;
    let target = PruneTarget {
        num_layers: pick(a.target_layers, sec.target_layers, cfg.num_layers),
        hidden_dim: pick(a.target_hidden, sec.target_hidden, cfg.hidden_dim),
        num_heads: pick(a.target_heads, sec.target_heads, cfg.num_heads),
        intermediate_dim: pick(
            a.target_intermediate,
            sec.target_intermediate,
            cfg.intermediate_dim,
        ),
    };
    target.validate(&cfg)?;
    let steps = pick(a.steps, sec.steps, 200);
    let batch_size = pick(a.batch_size, sec.batch_size, 2);
    let init_log_alpha = pick(a.init_log_alpha, sec.init_log_alpha, 2.0);
    let rates = PruneRates {
        lr_theta: pick(a.lr_theta, sec.lr_theta, PruneRates::default().lr_theta),
        lr_alpha: pick(a.lr_alpha, sec.lr_alpha, PruneRates::default().lr_alpha),
        eta_lambda: pick(a.eta_lambda, sec.eta_lambda, PruneRates::default().eta_lambda),
        eta_phi: pick(a.eta_phi, sec.eta_phi, PruneRates::default().eta_phi),
    };
    let out_masks = a
        .out_masks
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.masks.json", a.out.display())));

    let docs = read_documents(&a.corpus)?;
    let tok: WordTokenizer = match &a.vocab {
        Some(v) => load_tokenizer(v, cfg.vocab_size)?,
        None => {
            let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
            let unk = (cfg.vocab_size / 8).max(1);
            let words = build_vocab(texts.iter().copied(), cfg.vocab_size - unk);
            WordTokenizer::new(&words, cfg.vocab_size - words.len())
        }
    };
    let corpus = corpus_sequences(&docs, &tok, &cfg)?;

    let mut masks = MaskSet::init(&cfg, init_log_alpha, &mut rng_for(ctx.seed, "prune/init"));
    let mut lagrange = LagrangeState::zeros(cfg.num_layers);
    let mut noise_rng = rng_for(ctx.seed, "prune/noise");
    let mut last_loss = f64::NAN;
    for step in 0..steps {
        let mut batch_rng = rng_for(ctx.seed, &format!("prune/batch/{step}"));
        let batch: Vec<TokenSequence> = (0..batch_size)
            .map(|_| corpus[batch_rng.gen_range(0..corpus.len())].clone())
            .collect();
        last_loss = prune_step(
            &cfg,
            &mut params,
            &mut masks,
            &mut lagrange,
            &target,
            &batch,
            &rates,
            &mut noise_rng,
        )?;
    }
    save_checkpoint(&a.out, &cfg, &params, CheckpointPrecision::F64)?;
    let state = PruneState {
        schema_version: 1,
        target,
        masks,
        lagrange,
    };
    std::fs::write(&out_masks, serde_json::to_string(&state)?)
        .map_err(|e| Error::io(out_masks.display().to_string(), e))?;
    println!("prune: {steps} steps, final loss {last_loss:.6}");
    let mut inputs: Vec<&Path> = vec![&a.init, &a.corpus];
    if let Some(v) = &a.vocab {
        inputs.push(v);
    }
    ctx.write_manifest(
        &manifest_path_for(&a.out),
        serde_json::json!({
            "target": target, "steps": steps, "batch_size": batch_size,
            "init_log_alpha": init_log_alpha, "rates": rates,
        }),
        &inputs,
        &[&a.out, &out_masks],
    )
}

fn cmd_snap(ctx: &RunContext, a: SnapArgs) -> Result<()> {
    let (cfg, params) = load_checkpoint(&a.ckpt)?;
    let text = std::fs::read_to_string(&a.masks)
        .map_err(|e| Error::io(a.masks.display().to_string(), e))?;
    let state: PruneState = serde_json::from_str(&text)?;
    if state.schema_version != 1 {
        return Err(Error::Data(format!(
            "unsupported mask schema {}",
            state.schema_version
        )));
    }
    let (new_cfg, new_params) = snap_architecture(&cfg, &params, &state.masks, &state.target)?;
    save_checkpoint(&a.out, &new_cfg, &new_params, CheckpointPrecision::F64)?;
    println!(
        "snap: {} -> {} parameters",
        params.num_params(),
        new_params.num_params()
    );
    ctx.write_manifest(
        &manifest_path_for(&a.out),
        serde_json::json!({ "target": state.target }),
        &[&a.ckpt, &a.masks],
        &[&a.out],
    )
}

fn cmd_pretrain(ctx: &RunContext, a: PretrainArgs, sec: &PretrainSection) -> Result<()> {
    let (cfg, mut params) = load_checkpoint(&a.ckpt)?;
    require_unidirectional(&cfg, "pretrain")?;
    let steps = pick(a.steps, sec.steps, 100);
    let batch_size = pick(a.batch_size, sec.batch_size, 2);
    let lr = pick(a.lr, sec.lr, 1e-3);
    let docs = read_documents(&a.corpus)?;
    let tok: WordTokenizer = match &a.vocab {
        Some(v) => load_tokenizer(v, cfg.vocab_size)?,
        None => {
            let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
            let unk = (cfg.vocab_size / 8).max(1);
            let words = build_vocab(texts.iter().copied(), cfg.vocab_size - unk);
            WordTokenizer::new(&words, cfg.vocab_size - words.len())
        }
    };
    let corpus = corpus_sequences(&docs, &tok, &cfg)?;
    let history = continued_pretrain(
        &cfg,
        &mut params,
        &corpus,
        steps,
        batch_size,
        lr,
        derive_seed(ctx.seed, "pretrain"),
    )?;
    save_checkpoint(&a.out, &cfg, &params, CheckpointPrecision::F64)?;
    println!(
        "pretrain: {} steps, loss {:.6} -> {:.6}",
        steps,
        history.first().copied().unwrap_or(f64::NAN),
        history.last().copied().unwrap_or(f64::NAN)
    );
    let mut inputs: Vec<&Path> = vec![&a.ckpt, &a.corpus];
    if let Some(v) = &a.vocab {
        inputs.push(v);
    }
    ctx.write_manifest(
        &manifest_path_for(&a.out),
        serde_json::json!({ "steps": steps, "batch_size": batch_size, "lr": lr }),
        &inputs,
        &[&a.out],
    )
}

fn cmd_encode(ctx: &RunContext, a: EncodeArgs, sec: &EncodeSection) -> Result<()> {
    let (cfg, params) = load_checkpoint(&a.ckpt)?;
    let dim = a.dim.or(sec.dim);
    let tok = load_tokenizer(&a.vocab, cfg.vocab_size)?;
    let docs = read_documents(&a.input)?;
    let mut truncated = 0usize;
    let mut records = Vec::with_capacity(docs.len());
    for d in &docs {
        let ids = tok.tokenize(&d.text);
        if ids.is_empty() {
            return Err(Error::Data(format!("document {:?} tokenizes to nothing", d.id)));
        }
        let (seq, cut) = TokenSequence::unpadded(ids).truncated(cfg.max_positions);
        if cut {
            truncated += 1;
        }
        let v = encode_text_seq(&cfg, &params, &seq, dim)?;
        records.push(EmbeddingRecord {
            id: d.id.clone(),
            vector: v.data().to_vec(),
        });
    }
    write_jsonl(&a.out, &records)?;
    println!(
        "encode: {} texts at dim {}, {} truncated",
        records.len(),
        dim.unwrap_or(cfg.hidden_dim),
        truncated
    );
    ctx.write_manifest(
        &manifest_path_for(&a.out),
        serde_json::json!({ "dim": dim }),
        &[&a.ckpt, &a.vocab, &a.input],
        &[&a.out],
    )
}

fn cmd_index(ctx: &RunContext, a: IndexArgs) -> Result<()> {
    let records: Vec<EmbeddingRecord> = read_jsonl(&a.embeddings)?;
    let index = ExactIndex::build(records.into_iter().map(|r| (r.id, r.vector)).collect())?;
    index.save(&a.out)?;
    println!("index: {} vectors of dim {}", index.len(), index.dim());
    ctx.write_manifest(
        &manifest_path_for(&a.out),
        serde_json::json!({}),
        &[&a.embeddings],
        &[&a.out],
    )
}

fn cmd_search(ctx: &RunContext, a: SearchArgs, sec: &SearchSection) -> Result<()> {
    let k = pick(a.k, sec.k, 10);
    let tag = pick(a.tag.clone(), sec.tag.clone(), "miniret".to_string());
    let index = ExactIndex::load(&a.index)?;
    let queries: Vec<EmbeddingRecord> = read_jsonl(&a.queries)?;
    let k = k.min(index.len());
    let mut lines = Vec::new();
    for q in &queries {
        for (rank, (docid, score)) in index.search(&q.vector, k)?.into_iter().enumerate() {
            lines.push(RunLine {
                qid: q.id.clone(),
                docid,
                rank: rank + 1,
                score,
                tag: tag.clone(),
            });
        }
    }
    write_run(&a.out, &lines)?;
    println!("search: {} queries, top {k} each", queries.len());
    ctx.write_manifest(
        &manifest_path_for(&a.out),
        serde_json::json!({ "k": k, "tag": tag }),
        &[&a.index, &a.queries],
        &[&a.out],
    )
}

fn cmd_eval(ctx: &RunContext, a: EvalArgs, sec: &EvalSection) -> Result<()> {
    let (cfg, params) = load_checkpoint(&a.ckpt)?;
    let tok = load_tokenizer(&a.vocab, cfg.vocab_size)?;
    let docs = read_documents(&a.corpus)?;
    let query_docs = read_documents(&a.queries)?;
    let qrels = Qrels::read_tsv(&a.qrels)?;
    let spec = EvalSpec {
        k: pick(a.k, sec.k, 10),
        target_dim: a.dim.or(sec.dim),
        tag: pick(a.tag.clone(), sec.tag.clone(), "miniret".to_string()),
    };
    let doc_pairs: Vec<(String, String)> =
        docs.iter().map(|d| (d.id.clone(), d.text.clone())).collect();
    let query_pairs: Vec<(String, String)> = query_docs
        .iter()
        .map(|d| (d.id.clone(), d.text.clone()))
        .collect();
    let (report, run, timings) =
        run_eval(&cfg, &params, &tok, &doc_pairs, &query_pairs, &qrels, &spec)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&report)?)
        .map_err(|e| Error::io(a.out.display().to_string(), e))?;
    // timings vary run to run, so they live outside the manifest
    let timings_path = PathBuf::from(format!("{}.timings.json", a.out.display()));
    std::fs::write(&timings_path, serde_json::to_string_pretty(&timings)?)
        .map_err(|e| Error::io(timings_path.display().to_string(), e))?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(run_path) = &a.run {
        write_run(run_path, &run)?;
        outputs.push(run_path);
    }
    println!(
        "eval: mean nDCG@{} = {:.5} over {} queries ({} truncated docs)",
        report.k, report.mean_ndcg, report.evaluated, report.truncated_docs
    );
    ctx.write_manifest(
        &manifest_path_for(&a.out),
        serde_json::json!({ "k": spec.k, "dim": spec.target_dim, "tag": spec.tag }),
        &[&a.ckpt, &a.vocab, &a.corpus, &a.queries, &a.qrels],
        &outputs,
    )
}

fn cmd_needle(ctx: &RunContext, a: NeedleArgs, sec: &NeedleSection) -> Result<()> {
    let lengths = match a.lengths.as_deref() {
        Some(s) => parse_dims(s)?,
        None => sec
            .lengths
            .clone()
            .unwrap_or_else(|| vec![256, 512, 1024]),
    };
    let spec = NeedleTaskSpec {
        lengths: lengths.clone(),
        tasks_per_length: pick(a.tasks_per_length, sec.tasks_per_length, 3),
        filler_vocab: pick(a.filler_vocab, sec.filler_vocab, 200),
        seed: derive_seed(ctx.seed, "needle"),
    };
    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| Error::io(a.out_dir.display().to_string(), e))?;
    let bundles = gen_needle_corpus(&spec)?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    for b in &bundles {
        let docs_path = a.out_dir.join(format!("docs_{}.jsonl", b.length));
        write_jsonl(&docs_path, &b.docs)?;
        let queries: Vec<Document> = b
            .queries
            .iter()
            .map(|(id, text)| Document {
                id: id.clone(),
                text: text.clone(),
                lang: "en".into(),
            })
            .collect();
        let queries_path = a.out_dir.join(format!("queries_{}.jsonl", b.length));
        write_jsonl(&queries_path, &queries)?;
        let qrels_path = a.out_dir.join(format!("qrels_{}.tsv", b.length));
        b.qrels.write_tsv(&qrels_path)?;
        outputs.extend([docs_path, queries_path, qrels_path]);
    }
    println!(
        "needle: {} lengths x {} tasks",
        lengths.len(),
        spec.tasks_per_length
    );
    let output_refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    ctx.write_manifest(
        &a.out_dir.join("needle.manifest.json"),
        serde_json::json!({
            "lengths": lengths,
            "tasks_per_length": spec.tasks_per_length,
            "filler_vocab": spec.filler_vocab,
        }),
        &[],
        &output_refs,
    )
}

/// Max relative gradient error of the encode -> contrastive-loss path at
/// one random point. Probes a few seeded coordinates of the first layer's
/// attention weights, the gate projection, and the token embedding.
pub fn encode_loss_gradcheck(point_seed: u64, coords: usize) -> Result<f64> {
    let cfg = EncoderConfig::toy();
    let params = Parameters::init(&cfg, &mut rng_for(point_seed, "gradcheck/params"));
    let mut seq_rng = rng_for(point_seed, "gradcheck/seqs");
    let make_seq = |rng: &mut rand_chacha::ChaCha8Rng| {
        TokenSequence::unpadded((0..4).map(|_| rng.gen_range(0..cfg.vocab_size)).collect())
    };
    let queries = [make_seq(&mut seq_rng), make_seq(&mut seq_rng)];
    let candidates = [make_seq(&mut seq_rng), make_seq(&mut seq_rng)];

    let base = params.clone();
    let cfg2 = cfg.clone();
    let f = move |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let mut p = base.clone();
        p.token_embedding = tape.value(vars[0]).clone();
        p.layers[0].wq = tape.value(vars[1]).clone();
        p.layers[0].w_gate = tape.value(vars[2]).clone();
        let mut pvars = ParamVars::insert(tape, &p, false);
        pvars.token_embedding = vars[0];
        pvars.layers[0].wq = vars[1];
        pvars.layers[0].w_gate = vars[2];
        let stack = |tape: &mut Tape, rows: &[Var]| -> Result<Var> {
            let cols: Vec<Var> = rows.iter().map(|&r| tape.transpose(r)).collect();
            let wide = tape.concat_cols(&cols)?;
            Ok(tape.transpose(wide))
        };
        let mut qrows = Vec::new();
        for s in &queries {
            qrows.push(crate::encoder::encode_on_tape(tape, &cfg2, &pvars, s, None)?);
        }
        let mut crows = Vec::new();
        for s in &candidates {
            crows.push(crate::encoder::encode_on_tape(tape, &cfg2, &pvars, s, None)?);
        }
        let q = stack(tape, &qrows)?;
        let c = stack(tape, &crows)?;
        batch_loss_on_tape(tape, q, c, &[0, 1], 0.05)
    };
    let points: Vec<Tensor> = vec![
        params.token_embedding.clone(),
        params.layers[0].wq.clone(),
        params.layers[0].w_gate.clone(),
    ];
    crate::gradcheck::grad_check(&f, &points, 1e-5, Some(coords), derive_seed(point_seed, "gc"))
}

fn cmd_gradcheck(_ctx: &RunContext, a: GradcheckArgs, sec: &GradcheckSection) -> Result<()> {
    let coords = pick(a.coords, sec.coords, 3);
    let points = pick(a.points, sec.points, 3);
    let mut max_err: f64 = 0.0;
    for p in 0..points {
        let err = encode_loss_gradcheck(1000 + p as u64, coords)?;
        println!("gradcheck point {p}: max relative error {err:.3e}");
        max_err = max_err.max(err);
    }
    println!("gradcheck: max relative error {max_err:.3e}");
    if max_err > 1e-5 {
        return Err(Error::NonFinite(format!(
            "gradient check failed: {max_err:.3e} > 1e-5"
        )));
    }
    Ok(())
}
