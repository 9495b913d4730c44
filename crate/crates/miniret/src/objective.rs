//! InfoNCE contrastive loss with in-batch and hard negatives, the
//! Matryoshka multi-dimension wrapper, batch assembly, and the Adam step.

use crate::data::TrainingTriplet;
use crate::encoder::{self, EncoderConfig, ParamVars, Parameters, TokenSequence};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Softmax temperature. The usual retriever range; configurable.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Ascending truncation dims; the last entry must be the full dim.
    pub mrl_dims: Vec<usize>,
    /// One positive weight per dim; defaults to uniform.
    #[serde(default)]
    pub mrl_weights: Vec<f64>,
    pub num_hard_negatives: usize,
}

fn default_temperature() -> f64 {
    0.05
}

impl LossConfig {
    pub fn single_dim(full_dim: usize, num_hard_negatives: usize) -> Self {
        LossConfig {
            temperature: default_temperature(),
            mrl_dims: vec![full_dim],
            mrl_weights: vec![1.0],
            num_hard_negatives,
        }
    }

    pub fn validate(&self, full_dim: usize) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.mrl_dims.is_empty() {
            return Err(Error::Config("mrl_dims must be nonempty".into()));
        }
        if !self.mrl_dims.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("mrl_dims must be strictly ascending".into()));
        }
        if *self.mrl_dims.last().unwrap() != full_dim {
            return Err(Error::Config(format!(
                "last mrl dim {} must equal the full dim {}",
                self.mrl_dims.last().unwrap(),
                full_dim
            )));
        }
        if self.mrl_dims[0] == 0 {
            return Err(Error::Config("mrl dims must be >= 1".into()));
        }
        let weights = self.weights();
        if weights.len() != self.mrl_dims.len() || weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::Config(
                "mrl_weights must be positive, one per dim".into(),
            ));
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        if self.mrl_weights.is_empty() {
            vec![1.0 / self.mrl_dims.len() as f64; self.mrl_dims.len()]
        } else {
            self.mrl_weights.clone()
        }
    }
}

/// Embedding-level batch: query rows, candidate rows, and each query's
/// positive index into the candidate pool.
#[derive(Clone, Debug)]
pub struct Batch {
    pub queries: Tensor,
    pub candidates: Tensor,
    pub positive_index: Vec<usize>,
}

impl Batch {
    pub fn validate(&self) -> Result<()> {
        if self.queries.rows() != self.positive_index.len() {
            return Err(Error::invalid("one positive index per query required"));
        }
        if self.queries.cols() != self.candidates.cols() {
            return Err(Error::ShapeMismatch {
                op: "batch",
                left: self.queries.shape().to_vec(),
                right: self.candidates.shape().to_vec(),
            });
        }
        if let Some(&bad) = self
            .positive_index
            .iter()
            .find(|&&i| i >= self.candidates.rows())
        {
            return Err(Error::invalid(format!(
                "positive index {} out of pool of {}",
                bad,
                self.candidates.rows()
            )));
        }
        Ok(())
    }
}

/// Cosine similarity a·b / (|a||b|). Zero-norm inputs are rejected.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding(
            "cosine_sim on a zero vector".into(),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// InfoNCE for one query over {positive} ∪ negatives, computed with
/// max-subtraction. Zero loss when there are no negatives.
pub fn infonce(query: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::invalid("infonce: temperature must be > 0"));
    }
    let mut sims = Vec::with_capacity(1 + negatives.len());
    sims.push(cosine_sim(query, positive)?);
    for n in negatives {
        sims.push(cosine_sim(query, n)?);
    }
    if sims.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("infonce similarity".into()));
    }
    let scaled: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + scaled.iter().map(|s| (s - mx).exp()).sum::<f64>().ln();
    Ok(lse - scaled[0])
}

/// Batch InfoNCE on a tape: mean over queries, each scored against the
/// full candidate pool. `queries` and `candidates` must be unit-norm rows
/// (similarity is then the plain dot product).
pub fn batch_loss_on_tape(
    tape: &mut Tape,
    queries: Var,
    candidates: Var,
    positive_index: &[usize],
    tau: f64,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::invalid("temperature must be > 0"));
    }
    let b = tape.value(queries).rows();
    if positive_index.len() != b {
        return Err(Error::invalid("one positive index per query required"));
    }
    let ct = tape.transpose(candidates);
    let sims = tape.matmul(queries, ct)?;
    if !tape.value(sims).all_finite() {
        return Err(Error::NonFinite("batch similarity matrix".into()));
    }
    let scaled = tape.scale(sims, 1.0 / tau);
    let lse = tape.row_logsumexp(scaled);
    let picked = tape.gather_cols(scaled, positive_index.to_vec())?;
    let per_query = tape.sub(lse, picked)?;
    let total = tape.sum_all(per_query);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Plain-value batch loss over an embedding [`Batch`].
pub fn batch_loss(batch: &Batch, cfg: &LossConfig) -> Result<f64> {
    batch.validate()?;
    let mut tape = Tape::no_grad();
    let q = tape.constant(batch.queries.clone());
    let c = tape.constant(batch.candidates.clone());
    let loss = batch_loss_on_tape(&mut tape, q, c, &batch.positive_index, cfg.temperature)?;
    Ok(tape.value(loss).scalar_value())
}

/// MRL loss on raw (pre-normalization) pooled vectors: for each target
/// dim, truncate, renormalize, take the batch loss; combine by weight.
/// Truncation always precedes normalization.
pub fn mrl_loss_on_tape(
    tape: &mut Tape,
    raw_queries: Var,
    raw_candidates: Var,
    positive_index: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let full = tape.value(raw_queries).cols();
    cfg.validate(full)?;
    let weights = cfg.weights();
    let mut total: Option<Var> = None;
    for (&dim, &w) in cfg.mrl_dims.iter().zip(&weights) {
        let (q, c) = if dim < full {
            (
                tape.slice_cols(raw_queries, 0, dim)?,
                tape.slice_cols(raw_candidates, 0, dim)?,
            )
        } else {
            (raw_queries, raw_candidates)
        };
        let qn = tape.normalize_rows(q).map_err(|e| match e {
            Error::DegenerateEmbedding(msg) => {
                Error::DegenerateEmbedding(format!("{msg} (mrl dim {dim}, queries)"))
            }
            other => other,
        })?;
        let cn = tape.normalize_rows(c).map_err(|e| match e {
            Error::DegenerateEmbedding(msg) => {
                Error::DegenerateEmbedding(format!("{msg} (mrl dim {dim}, candidates)"))
            }
            other => other,
        })?;
        let loss = batch_loss_on_tape(tape, qn, cn, positive_index, cfg.temperature)?;
        let term = tape.scale(loss, w);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one mrl dim"))
}

/// Plain-value MRL loss over raw pooled vectors.
pub fn mrl_loss(
    raw_queries: &Tensor,
    raw_candidates: &Tensor,
    positive_index: &[usize],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let q = tape.constant(raw_queries.clone());
    let c = tape.constant(raw_candidates.clone());
    let loss = mrl_loss_on_tape(&mut tape, q, c, positive_index, cfg)?;
    Ok(tape.value(loss).scalar_value())
}

/// Text-level batch layout: query i's positive sits at pool index
/// i·(1+N), its negatives follow.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub queries: Vec<String>,
    pub candidates: Vec<String>,
    pub positive_index: Vec<usize>,
    /// Duplicate candidate texts are kept; this counter surfaces them.
    pub duplicate_candidates: usize,
}

/// Lay out triplets into the deterministic batch order. Triplets with
/// more than N negatives keep the first N in stored order; triplets with
/// fewer resample their own negatives with replacement (seeded). A
/// triplet with zero negatives repeats its positive as filler only when
/// N > 0 is demanded and nothing else exists — that case is rejected.
pub fn plan_batch(triplets: &[TrainingTriplet], n_hard: usize, seed: u64) -> Result<BatchPlan> {
    if triplets.is_empty() {
        return Err(Error::Data("assemble_batch: empty triplet list".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::with_capacity(triplets.len());
    let mut candidates = Vec::with_capacity(triplets.len() * (1 + n_hard));
    let mut positive_index = Vec::with_capacity(triplets.len());
    for t in triplets {
        t.validate()?;
        positive_index.push(candidates.len());
        queries.push(t.query.clone());
        candidates.push(t.positive.clone());
        if n_hard == 0 {
            continue;
        }
        if t.negatives.is_empty() {
            return Err(Error::Data(format!(
                "triplet {:?} has no hard negatives but {} are required",
                t.query, n_hard
            )));
        }
        if t.negatives.len() >= n_hard {
            candidates.extend(t.negatives[..n_hard].iter().cloned());
        } else {
            candidates.extend(t.negatives.iter().cloned());
            for _ in t.negatives.len()..n_hard {
                let pick = rng.gen_range(0..t.negatives.len());
                candidates.push(t.negatives[pick].clone());
            }
        }
    }
    let mut seen = std::collections::HashSet::new();
    let duplicate_candidates = candidates.iter().filter(|c| !seen.insert(c.as_str())).count();
    if duplicate_candidates > 0 {
        log::warn!("batch pool contains {duplicate_candidates} duplicate candidate texts");
    }
    Ok(BatchPlan {
        queries,
        candidates,
        positive_index,
        duplicate_candidates,
    })
}

/// Assemble an embedding batch by running `encode` over the planned
/// layout. The encode function must return unit-norm embeddings.
pub fn assemble_batch<F>(plan: &BatchPlan, mut encode: F) -> Result<Batch>
where
    F: FnMut(&str) -> Result<Tensor>,
{
    let embed_all = |texts: &[String], encode: &mut F| -> Result<Tensor> {
        let mut rows: Vec<f64> = Vec::new();
        let mut dim = 0;
        for t in texts {
            let e = encode(t)?;
            dim = e.cols();
            rows.extend_from_slice(e.data());
        }
        Tensor::matrix(texts.len(), dim, rows)
    };
    let queries = embed_all(&plan.queries, &mut encode)?;
    let candidates = embed_all(&plan.candidates, &mut encode)?;
    let batch = Batch {
        queries,
        candidates,
        positive_index: plan.positive_index.clone(),
    };
    batch.validate()?;
    Ok(batch)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[&Tensor]) -> Self {
        AdamState {
            m: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_params(params: &Parameters) -> Self {
        let refs: Vec<&Tensor> = params.named_tensors().into_iter().map(|(_, t)| t).collect();
        Self::new(&refs)
    }

    /// One update over parallel slices of parameters and gradients.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid("optimizer state/parameter count mismatch"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Tokenized batch ready for a training step.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub queries: Vec<TokenSequence>,
    pub candidates: Vec<TokenSequence>,
    pub positive_index: Vec<usize>,
}

/// Stack per-sequence pooled rows (1 x h vars) into one (n x h) var.
fn stack_rows(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    let cols: Vec<Var> = rows.iter().map(|&r| tape.transpose(r)).collect();
    let wide = tape.concat_cols(&cols)?;
    Ok(tape.transpose(wide))
}

/// One Adam update on the MRL loss. Returns the loss value. A non-finite
/// loss aborts the step with parameters and optimizer state unchanged.
pub fn train_step(
    cfg: &EncoderConfig,
    params: &mut Parameters,
    opt: &mut AdamState,
    batch: &TokenBatch,
    loss_cfg: &LossConfig,
    lr: f64,
) -> Result<f64> {
    if !params.all_finite() {
        return Err(Error::NonFinite("parameters before step".into()));
    }
    let mut tape = Tape::new();
    let pvars = ParamVars::insert(&mut tape, params, true);

    let mut qrows = Vec::with_capacity(batch.queries.len());
    for seq in &batch.queries {
        qrows.push(encoder::pooled_raw(&mut tape, cfg, &pvars, seq)?);
    }
    let mut crows = Vec::with_capacity(batch.candidates.len());
    for seq in &batch.candidates {
        crows.push(encoder::pooled_raw(&mut tape, cfg, &pvars, seq)?);
    }
    let q = stack_rows(&mut tape, &qrows)?;
    let c = stack_rows(&mut tape, &crows)?;
    let loss = mrl_loss_on_tape(&mut tape, q, c, &batch.positive_index, loss_cfg)?;
    let loss_value = tape.value(loss).scalar_value();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss_value}")));
    }

    let grads = tape.backward(loss)?;
    let vars = pvars.all_vars();
    let grad_tensors: Vec<Tensor> = vars
        .iter()
        .zip(params.named_tensors())
        .map(|(&v, (_, t))| {
            grads
                .wrt(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    if grad_tensors.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let mut slots = params.tensors_mut();
    opt.step(&mut slots, &grad_tensors, lr)?;
    Ok(loss_value)
}

/// Full contrastive training run description.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSpec {
    pub steps: usize,
    #[serde(default = "default_fit_batch")]
    pub batch_size: usize,
    #[serde(default = "default_fit_lr")]
    pub lr: f64,
    pub seed: u64,
}

fn default_fit_batch() -> usize {
    4
}
fn default_fit_lr() -> f64 {
    1e-3
}

fn to_sequence(
    tok: &dyn crate::tokenizer::Tokenize,
    cfg: &EncoderConfig,
    text: &str,
) -> Result<TokenSequence> {
    let ids = tok.tokenize(text);
    if ids.is_empty() {
        return Err(Error::Data(format!("text {text:?} tokenizes to nothing")));
    }
    let (seq, _) = TokenSequence::unpadded(ids).truncated(cfg.max_positions);
    Ok(seq)
}

/// Train from scratch or continue: seeded batch sampling over triplets,
/// one Adam update per step. Returns the per-step loss history.
pub fn fit(
    cfg: &EncoderConfig,
    params: &mut Parameters,
    tok: &dyn crate::tokenizer::Tokenize,
    triplets: &[TrainingTriplet],
    loss_cfg: &LossConfig,
    spec: &FitSpec,
) -> Result<Vec<f64>> {
    loss_cfg.validate(cfg.hidden_dim)?;
    if triplets.is_empty() {
        return Err(Error::Data("fit: no training triplets".into()));
    }
    if spec.batch_size == 0 {
        return Err(Error::Config("fit: batch_size must be >= 1".into()));
    }
    let mut opt = AdamState::for_params(params);
    let mut history = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let mut rng = crate::rng::rng_for(spec.seed, &format!("fit/{step}"));
        let chosen: Vec<TrainingTriplet> = (0..spec.batch_size)
            .map(|_| triplets[rng.gen_range(0..triplets.len())].clone())
            .collect();
        let plan = plan_batch(
            &chosen,
            loss_cfg.num_hard_negatives,
            crate::rng::derive_seed(spec.seed, &format!("fit/plan/{step}")),
        )?;
        let batch = TokenBatch {
            queries: plan
                .queries
                .iter()
                .map(|t| to_sequence(tok, cfg, t))
                .collect::<Result<_>>()?,
            candidates: plan
                .candidates
                .iter()
                .map(|t| to_sequence(tok, cfg, t))
                .collect::<Result<_>>()?,
            positive_index: plan.positive_index.clone(),
        };
        history.push(train_step(cfg, params, &mut opt, &batch, loss_cfg, spec.lr)?);
    }
    Ok(history)
}
