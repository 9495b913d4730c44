//! Miniature decoder-style transformer used as the retriever backbone.
//!
//! The block structure mirrors the Llama family: RMS pre-norms, rotary
//! positions, SiLU-gated feed-forward, no biases, tied token embedding
//! for the language-modeling head. Attention direction and pooling are
//! switchable because the backbone doubles as a bidirectional text
//! encoder after pruning.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointPrecision};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Bidirectional,
    Unidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Eos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub intermediate_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    pub attention_mode: AttentionMode,
    pub pooling: Pooling,
}

fn default_rope_theta() -> f64 {
    10_000.0
}

impl EncoderConfig {
    /// Desk-scale default: exercises every code path in seconds.
    pub fn toy() -> Self {
        EncoderConfig {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            intermediate_dim: 256,
            vocab_size: 512,
            max_positions: 256,
            rope_theta: 10_000.0,
            attention_mode: AttentionMode::Bidirectional,
            pooling: Pooling::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.num_layers,
            self.hidden_dim,
            self.num_heads,
            self.intermediate_dim,
            self.vocab_size,
            self.max_positions,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Config("all encoder counts must be >= 1".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary positions",
                self.head_dim()
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// Learnable weights, shapes fixed by an [`EncoderConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub token_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
}

impl Parameters {
    pub fn init<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let h = cfg.hidden_dim;
        let inter = cfg.intermediate_dim;
        let scale = 1.0 / (h as f64).sqrt();
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::full(&[1, h], 1.0),
                wq: Tensor::rand_uniform(&[h, h], scale, rng),
                wk: Tensor::rand_uniform(&[h, h], scale, rng),
                wv: Tensor::rand_uniform(&[h, h], scale, rng),
                wo: Tensor::rand_uniform(&[h, h], scale, rng),
                ffn_norm: Tensor::full(&[1, h], 1.0),
                w_gate: Tensor::rand_uniform(&[h, inter], scale, rng),
                w_up: Tensor::rand_uniform(&[h, inter], scale, rng),
                w_down: Tensor::rand_uniform(&[inter, h], 1.0 / (inter as f64).sqrt(), rng),
            })
            .collect();
        Parameters {
            token_embedding: Tensor::rand_uniform(&[cfg.vocab_size, h], 0.5, rng),
            layers,
            final_norm: Tensor::full(&[1, h], 1.0),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.wq"), &l.wq));
            out.push((format!("layers.{i}.wk"), &l.wk));
            out.push((format!("layers.{i}.wv"), &l.wv));
            out.push((format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.ffn_norm"), &l.ffn_norm));
            out.push((format!("layers.{i}.w_gate"), &l.w_gate));
            out.push((format!("layers.{i}.w_up"), &l.w_up));
            out.push((format!("layers.{i}.w_down"), &l.w_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.token_embedding];
        for l in &mut self.layers {
            out.push(&mut l.attn_norm);
            out.push(&mut l.wq);
            out.push(&mut l.wk);
            out.push(&mut l.wv);
            out.push(&mut l.wo);
            out.push(&mut l.ffn_norm);
            out.push(&mut l.w_gate);
            out.push(&mut l.w_up);
            out.push(&mut l.w_down);
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }
}

/// Closed-form parameter count for a config (tied LM head, no biases).
pub fn param_count(cfg: &EncoderConfig) -> usize {
    let h = cfg.hidden_dim;
    let per_layer = 2 * h + 4 * h * h + 3 * h * cfg.intermediate_dim;
    cfg.vocab_size * h + cfg.num_layers * per_layer + h
}

/// Token ids plus a pad mask (1 = real token, 0 = padding).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
}

impl TokenSequence {
    pub fn unpadded(ids: Vec<usize>) -> Self {
        let mask = vec![1; ids.len()];
        TokenSequence { ids, mask }
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.ids.len() != self.mask.len() {
            return Err(Error::Data("ids and mask lengths differ".into()));
        }
        if self.ids.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if self.ids.len() > cfg.max_positions {
            return Err(Error::Data(format!(
                "sequence of {} tokens exceeds max_positions {}",
                self.ids.len(),
                cfg.max_positions
            )));
        }
        if !self.mask.iter().any(|&m| m == 1) {
            return Err(Error::Data("all positions are masked".into()));
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Data(format!(
                "token id {} out of vocab {}",
                id, cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Keep the first `max` positions, preserving the pad mask.
    pub fn truncated(&self, max: usize) -> (TokenSequence, bool) {
        if self.ids.len() <= max {
            (self.clone(), false)
        } else {
            (
                TokenSequence {
                    ids: self.ids[..max].to_vec(),
                    mask: self.mask[..max].to_vec(),
                },
                true,
            )
        }
    }
}

/// Per-layer mask variables for structured pruning. Absent for plain
/// encoding. `head[l]` is 1 x H, `int[l]` is 1 x intermediate, `layer` is
/// 1 x L, `hidden` is 1 x hidden and shared across layers.
pub struct MaskVars {
    pub head: Vec<Var>,
    pub int: Vec<Var>,
    pub layer: Var,
    pub hidden: Var,
}

/// Parameter leaves inserted on a tape.
pub struct ParamVars {
    pub token_embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
}

pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl ParamVars {
    pub fn insert(tape: &mut Tape, params: &Parameters, requires_grad: bool) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm: tape.leaf(l.attn_norm.clone(), requires_grad),
                wq: tape.leaf(l.wq.clone(), requires_grad),
                wk: tape.leaf(l.wk.clone(), requires_grad),
                wv: tape.leaf(l.wv.clone(), requires_grad),
                wo: tape.leaf(l.wo.clone(), requires_grad),
                ffn_norm: tape.leaf(l.ffn_norm.clone(), requires_grad),
                w_gate: tape.leaf(l.w_gate.clone(), requires_grad),
                w_up: tape.leaf(l.w_up.clone(), requires_grad),
                w_down: tape.leaf(l.w_down.clone(), requires_grad),
            })
            .collect();
        ParamVars {
            token_embedding: tape.leaf(params.token_embedding.clone(), requires_grad),
            layers,
            final_norm: tape.leaf(params.final_norm.clone(), requires_grad),
        }
    }

    /// Vars in the same order as [`Parameters::tensors_mut`].
    pub fn all_vars(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding];
        for l in &self.layers {
            out.extend([
                l.attn_norm,
                l.wq,
                l.wk,
                l.wv,
                l.wo,
                l.ffn_norm,
                l.w_gate,
                l.w_up,
                l.w_down,
            ]);
        }
        out.push(self.final_norm);
        out
    }
}

fn rope_tables(cfg: &EncoderConfig, seq_len: usize) -> (Tensor, Tensor) {
    let half = cfg.head_dim() / 2;
    let mut cos = Vec::with_capacity(seq_len * half);
    let mut sin = Vec::with_capacity(seq_len * half);
    for pos in 0..seq_len {
        for j in 0..half {
            let freq = cfg.rope_theta.powf(-2.0 * j as f64 / cfg.head_dim() as f64);
            let angle = pos as f64 * freq;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (
        Tensor::matrix(seq_len, half, cos).expect("rope cos"),
        Tensor::matrix(seq_len, half, sin).expect("rope sin"),
    )
}

const NEG_FILL: f64 = -1.0e30;

/// Attention blocking mask: true = position pair may not attend.
fn attention_block_mask(mode: AttentionMode, pad: &[u8]) -> Vec<bool> {
    let n = pad.len();
    let mut out = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let causal = matches!(mode, AttentionMode::Unidirectional) && j > i;
            out[i * n + j] = causal || pad[j] == 0;
        }
    }
    out
}

/// Full transformer forward: one hidden state per position (seq x hidden).
///
/// Unidirectional mode enforces a causal attention mask; bidirectional
/// mode attends over all unmasked positions. Pruning masks, when present,
/// scale head outputs, intermediate activations, residual branches, and
/// hidden channels multiplicatively.
pub fn forward_states(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    pvars: &ParamVars,
    seq: &TokenSequence,
    masks: Option<&MaskVars>,
) -> Result<Var> {
    cfg.validate()?;
    seq.validate(cfg)?;
    let n = seq.ids.len();
    let hd = cfg.head_dim();
    let (cos, sin) = rope_tables(cfg, n);
    let block = attention_block_mask(cfg.attention_mode, &seq.mask);

    let hidden_mask = masks.map(|m| m.hidden);
    let apply_hidden = |tape: &mut Tape, x: Var| -> Result<Var> {
        match hidden_mask {
            Some(hm) => tape.mul_row(x, hm),
            None => Ok(x),
        }
    };

    let mut x = tape.embed_lookup(pvars.token_embedding, seq.ids.clone())?;
    x = apply_hidden(tape, x)?;

    for (l, layer) in pvars.layers.iter().enumerate() {
        let layer_gate = match masks {
            Some(m) => Some(tape.slice_cols(m.layer, l, 1)?),
            None => None,
        };

        // attention branch
        let normed = tape.rms_norm(x, 1e-6);
        let normed = tape.mul_row(normed, layer.attn_norm)?;
        let q = tape.matmul(normed, layer.wq)?;
        let k = tape.matmul(normed, layer.wk)?;
        let v = tape.matmul(normed, layer.wv)?;

        let mut head_outs = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let qh = tape.rope(qh, cos.clone(), sin.clone())?;
            let kh = tape.rope(kh, cos.clone(), sin.clone())?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt());
            let scores = tape.masked_fill(scores, block.clone(), NEG_FILL)?;
            let probs = tape.row_softmax(scores);
            let mut out = tape.matmul(probs, vh)?;
            if let Some(m) = masks {
                let gate = tape.slice_cols(m.head[l], h, 1)?;
                out = tape.mul_by_scalar_var(out, gate)?;
            }
            head_outs.push(out);
        }
        let concat = tape.concat_cols(&head_outs)?;
        let mut attn_out = tape.matmul(concat, layer.wo)?;
        attn_out = apply_hidden(tape, attn_out)?;
        if let Some(g) = layer_gate {
            attn_out = tape.mul_by_scalar_var(attn_out, g)?;
        }
        x = tape.add(x, attn_out)?;

        // feed-forward branch
        let normed = tape.rms_norm(x, 1e-6);
        let normed = tape.mul_row(normed, layer.ffn_norm)?;
        let gate = tape.matmul(normed, layer.w_gate)?;
        let gate = tape.silu(gate);
        let up = tape.matmul(normed, layer.w_up)?;
        let mut ff = tape.mul(gate, up)?;
        if let Some(m) = masks {
            ff = tape.mul_row(ff, m.int[l])?;
        }
        let mut down = tape.matmul(ff, layer.w_down)?;
        down = apply_hidden(tape, down)?;
        if let Some(g) = layer_gate {
            down = tape.mul_by_scalar_var(down, g)?;
        }
        x = tape.add(x, down)?;
    }

    let out = tape.rms_norm(x, 1e-6);
    let out = tape.mul_row(out, pvars.final_norm)?;
    apply_hidden(tape, out)
}

/// Reduce per-position states to one vector (1 x hidden).
///
/// Mean mode is the mask-weighted average over unmasked positions; eos
/// mode is the state at the last unmasked position.
pub fn pool(tape: &mut Tape, states: Var, pad: &[u8], mode: Pooling) -> Result<Var> {
    let n = tape.value(states).rows();
    if pad.len() != n {
        return Err(Error::invalid(format!(
            "pool: mask of {} for {} positions",
            pad.len(),
            n
        )));
    }
    let count = pad.iter().filter(|&&m| m == 1).count();
    if count == 0 {
        return Err(Error::Data("pool: all positions masked".into()));
    }
    let weights = match mode {
        Pooling::Mean => pad
            .iter()
            .map(|&m| if m == 1 { 1.0 / count as f64 } else { 0.0 })
            .collect::<Vec<f64>>(),
        Pooling::Eos => {
            let last = pad.iter().rposition(|&m| m == 1).expect("unmasked");
            let mut w = vec![0.0; n];
            w[last] = 1.0;
            w
        }
    };
    let selector = tape.constant(Tensor::matrix(1, n, weights)?);
    tape.matmul(selector, states)
}

/// forward -> pool -> truncate to the first `target_dim` coordinates ->
/// L2-normalize. `target_dim = None` keeps the full hidden dimension.
pub fn encode_on_tape(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    pvars: &ParamVars,
    seq: &TokenSequence,
    target_dim: Option<usize>,
) -> Result<Var> {
    let dim = target_dim.unwrap_or(cfg.hidden_dim);
    if dim == 0 || dim > cfg.hidden_dim {
        return Err(Error::invalid(format!(
            "target_dim {} out of [1, {}]",
            dim, cfg.hidden_dim
        )));
    }
    let states = forward_states(tape, cfg, pvars, seq, None)?;
    let pooled = pool(tape, states, &seq.mask, cfg.pooling)?;
    let sliced = if dim < cfg.hidden_dim {
        tape.slice_cols(pooled, 0, dim)?
    } else {
        pooled
    };
    tape.normalize_rows(sliced)
}

/// Evaluation-only encode: no gradients, fresh tape per call.
pub fn encode(
    cfg: &EncoderConfig,
    params: &Parameters,
    seq: &TokenSequence,
    target_dim: Option<usize>,
) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let pvars = ParamVars::insert(&mut tape, params, false);
    let v = encode_on_tape(&mut tape, cfg, &pvars, seq, target_dim)?;
    Ok(tape.value(v).clone())
}

/// Raw pooled vector before truncation/normalization. Used by the MRL
/// loss, which truncates then renormalizes per target dimension.
pub fn pooled_raw(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    pvars: &ParamVars,
    seq: &TokenSequence,
) -> Result<Var> {
    let states = forward_states(tape, cfg, pvars, seq, None)?;
    pool(tape, states, &seq.mask, cfg.pooling)
}
