//! Structured pruning to a target architecture: hard-concrete gates over
//! heads, intermediate channels, layers, and hidden dims, with Lagrange
//! multipliers enforcing unit-count targets, then a snap to a dense
//! smaller model and continued language-model pretraining.

use crate::encoder::{
    self, EncoderConfig, LayerParams, MaskVars, ParamVars, Parameters, TokenSequence,
};
use crate::error::{Error, Result};
use crate::objective::AdamState;
use crate::rng::rng_for;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stretch and sharpness constants of the hard-concrete gate.
pub const GAMMA: f64 = -0.1;
pub const ZETA: f64 = 1.1;
pub const BETA: f64 = 2.0 / 3.0;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Deterministic gate value: clamp(sigmoid(a)*(zeta-gamma)+gamma, 0, 1).
pub fn mask_deterministic(log_alpha: &Tensor) -> Tensor {
    let data = log_alpha
        .data()
        .iter()
        .map(|&a| (sigmoid(a) * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0))
        .collect();
    Tensor::new(log_alpha.shape().to_vec(), data).expect("same shape")
}

/// Sampled gate value for a single unit at noise draw u in (0, 1).
pub fn mask_sample_value(log_alpha: f64, u: f64) -> f64 {
    let noise = u.ln() - (1.0 - u).ln();
    let s = sigmoid((noise + log_alpha) / BETA);
    (s * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0)
}

/// One logistic noise tensor, the common random numbers of a step.
fn logistic_noise(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(1e-9..1.0 - 1e-9);
            u.ln() - (1.0 - u).ln()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("noise shape")
}

/// Gate sets for every prunable structure. Holds log_alpha tensors; gate
/// values are derived deterministically or by sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    /// Per layer, 1 x num_heads.
    pub head: Vec<Tensor>,
    /// Per layer, 1 x intermediate_dim.
    pub int: Vec<Tensor>,
    /// 1 x num_layers.
    pub layer: Tensor,
    /// 1 x hidden_dim, shared across layers so the snapped hidden size
    /// is uniform.
    pub hidden: Tensor,
}

impl MaskSet {
    /// Gates start near-open at `init_log_alpha` with a small seeded
    /// jitter to break exact ties.
    pub fn init(cfg: &EncoderConfig, init_log_alpha: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut tensor = |n: usize| {
            let data = (0..n)
                .map(|_| init_log_alpha + rng.gen_range(-0.01..0.01))
                .collect();
            Tensor::new(vec![1, n], data).expect("mask shape")
        };
        MaskSet {
            head: (0..cfg.num_layers).map(|_| tensor(cfg.num_heads)).collect(),
            int: (0..cfg.num_layers)
                .map(|_| tensor(cfg.intermediate_dim))
                .collect(),
            layer: tensor(cfg.num_layers),
            hidden: tensor(cfg.hidden_dim),
        }
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        let ok = self.head.len() == cfg.num_layers
            && self.int.len() == cfg.num_layers
            && self.head.iter().all(|t| t.shape() == [1, cfg.num_heads])
            && self
                .int
                .iter()
                .all(|t| t.shape() == [1, cfg.intermediate_dim])
            && self.layer.shape() == [1, cfg.num_layers]
            && self.hidden.shape() == [1, cfg.hidden_dim];
        if !ok {
            return Err(Error::invalid("mask set does not match the architecture"));
        }
        Ok(())
    }

    pub fn all_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.head.iter_mut());
        out.extend(self.int.iter_mut());
        out.push(&mut self.layer);
        out.push(&mut self.hidden);
        out
    }
}

/// Target unit counts of the snapped architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneTarget {
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub intermediate_dim: usize,
}

impl PruneTarget {
    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        let pairs = [
            ("num_heads", self.num_heads, cfg.num_heads),
            ("hidden_dim", self.hidden_dim, cfg.hidden_dim),
            ("num_layers", self.num_layers, cfg.num_layers),
            (
                "intermediate_dim",
                self.intermediate_dim,
                cfg.intermediate_dim,
            ),
        ];
        for (name, t, s) in pairs {
            if t < 1 || t > s {
                return Err(Error::Config(format!(
                    "target {name} = {t} outside [1, {s}]"
                )));
            }
        }
        if self.hidden_dim % self.num_heads != 0
            || self.hidden_dim / self.num_heads != cfg.head_dim()
        {
            return Err(Error::Config(format!(
                "target hidden/heads = {}/{} must preserve the source head dim {}",
                self.hidden_dim,
                self.num_heads,
                cfg.head_dim()
            )));
        }
        Ok(())
    }
}

/// (lambda, phi) per constraint group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub head: Vec<(f64, f64)>,
    pub int: Vec<(f64, f64)>,
    pub layer: (f64, f64),
    pub hidden: (f64, f64),
}

impl LagrangeState {
    pub fn zeros(num_layers: usize) -> Self {
        LagrangeState {
            head: vec![(0.0, 0.0); num_layers],
            int: vec![(0.0, 0.0); num_layers],
            layer: (0.0, 0.0),
            hidden: (0.0, 0.0),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.head
            .iter()
            .chain(self.int.iter())
            .chain([&self.layer, &self.hidden])
            .all(|(l, p)| l.is_finite() && p.is_finite())
    }
}

/// lambda*(z_sum - target) + phi*(z_sum - target)^2.
pub fn constraint_loss(z_sum: f64, target: f64, lambda: f64, phi: f64) -> f64 {
    let v = z_sum - target;
    lambda * v + phi * v * v
}

/// Total pruning objective: language-model loss plus every constraint
/// term, a plain sum.
pub fn prune_total_loss(
    lm: f64,
    head_terms: &[f64],
    int_terms: &[f64],
    layer_term: f64,
    hidden_term: f64,
) -> f64 {
    lm + head_terms.iter().sum::<f64>() + int_terms.iter().sum::<f64>() + layer_term + hidden_term
}

/// Ascent update of one multiplier pair from the current violation.
pub fn update_multipliers(pair: &mut (f64, f64), violation: f64, eta_lambda: f64, eta_phi: f64) {
    pair.0 += eta_lambda * violation;
    pair.1 += eta_phi * violation * violation;
}

/// Gate vars plus their current (sampled or deterministic) values.
pub struct MaskGateVars {
    pub vars: MaskVars,
    pub values: MaskSet,
}

/// Log-alpha leaves on a tape, one per mask tensor.
pub struct MaskAlphaVars {
    pub head: Vec<Var>,
    pub int: Vec<Var>,
    pub layer: Var,
    pub hidden: Var,
}

impl MaskAlphaVars {
    pub fn insert(tape: &mut Tape, masks: &MaskSet, requires_grad: bool) -> Self {
        MaskAlphaVars {
            head: masks
                .head
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
            int: masks
                .int
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
            layer: tape.leaf(masks.layer.clone(), requires_grad),
            hidden: tape.leaf(masks.hidden.clone(), requires_grad),
        }
    }

    /// Same order as [`MaskSet::all_tensors_mut`].
    pub fn all_vars(&self) -> Vec<Var> {
        let mut out = self.head.clone();
        out.extend(self.int.iter().copied());
        out.push(self.layer);
        out.push(self.hidden);
        out
    }
}

/// z = clamp(sigmoid((noise + a)/beta)*(zeta-gamma)+gamma, 0, 1) on tape.
fn gate_on_tape(tape: &mut Tape, alpha: Var, noise: Option<Tensor>) -> Result<Var> {
    let pre = match noise {
        Some(n) => {
            let nv = tape.constant(n);
            let shifted = tape.add(alpha, nv)?;
            tape.scale(shifted, 1.0 / BETA)
        }
        None => alpha,
    };
    let s = tape.sigmoid(pre);
    let stretched = tape.scale(s, ZETA - GAMMA);
    let z = tape.add_scalar(stretched, GAMMA);
    Ok(tape.clamp(z, 0.0, 1.0))
}

/// Build gate vars from log-alpha leaves. `noise` carries one logistic
/// draw per unit (sampled path); `None` gives the deterministic gates.
pub fn build_gates(
    tape: &mut Tape,
    alphas: &MaskAlphaVars,
    noise: Option<&MaskSet>,
) -> Result<MaskGateVars> {
    let pick = |sel: fn(&MaskSet) -> &Tensor| noise.map(|n| sel(n).clone());
    let pick_i = |i: usize, head: bool| {
        noise.map(|n| {
            if head {
                n.head[i].clone()
            } else {
                n.int[i].clone()
            }
        })
    };
    let mut head = Vec::with_capacity(alphas.head.len());
    for (i, &a) in alphas.head.iter().enumerate() {
        head.push(gate_on_tape(tape, a, pick_i(i, true))?);
    }
    let mut int = Vec::with_capacity(alphas.int.len());
    for (i, &a) in alphas.int.iter().enumerate() {
        int.push(gate_on_tape(tape, a, pick_i(i, false))?);
    }
    let layer = gate_on_tape(tape, alphas.layer, pick(|n| &n.layer))?;
    let hidden = gate_on_tape(tape, alphas.hidden, pick(|n| &n.hidden))?;
    let values = MaskSet {
        head: head.iter().map(|&v| tape.value(v).clone()).collect(),
        int: int.iter().map(|&v| tape.value(v).clone()).collect(),
        layer: tape.value(layer).clone(),
        hidden: tape.value(hidden).clone(),
    };
    Ok(MaskGateVars {
        vars: MaskVars {
            head,
            int,
            layer,
            hidden,
        },
        values,
    })
}

/// Draw the logistic noise for one sampled-gate step.
pub fn sample_noise(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> MaskSet {
    MaskSet {
        head: (0..cfg.num_layers)
            .map(|_| logistic_noise(&[1, cfg.num_heads], rng))
            .collect(),
        int: (0..cfg.num_layers)
            .map(|_| logistic_noise(&[1, cfg.intermediate_dim], rng))
            .collect(),
        layer: logistic_noise(&[1, cfg.num_layers], rng),
        hidden: logistic_noise(&[1, cfg.hidden_dim], rng),
    }
}

/// Mean next-token cross-entropy over unmasked positions, with the tied
/// token embedding as the output head. Requires unidirectional attention
/// and at least two unmasked adjacent positions.
pub fn lm_loss_on_tape(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    pvars: &ParamVars,
    seq: &TokenSequence,
    masks: Option<&MaskVars>,
) -> Result<Var> {
    if cfg.attention_mode != encoder::AttentionMode::Unidirectional {
        return Err(Error::invalid(
            "language-model loss requires unidirectional attention",
        ));
    }
    let n = seq.ids.len();
    let predicting: Vec<usize> = (0..n.saturating_sub(1))
        .filter(|&i| seq.mask[i] == 1 && seq.mask[i + 1] == 1)
        .collect();
    if predicting.is_empty() {
        return Err(Error::Data(
            "language-model loss needs at least 2 unmasked positions".into(),
        ));
    }
    let states = encoder::forward_states(tape, cfg, pvars, seq, masks)?;
    let et = tape.transpose(pvars.token_embedding);
    let logits = tape.matmul(states, et)?;
    let lse = tape.row_logsumexp(logits);
    let targets: Vec<usize> = (0..n)
        .map(|i| if i + 1 < n { seq.ids[i + 1] } else { 0 })
        .collect();
    let picked = tape.gather_cols(logits, targets)?;
    let per_pos = tape.sub(lse, picked)?;
    let mut weights = vec![0.0; n];
    for &i in &predicting {
        weights[i] = 1.0 / predicting.len() as f64;
    }
    let w = tape.constant(Tensor::matrix(1, n, weights)?);
    let weighted = tape.matmul(w, per_pos)?;
    Ok(tape.sum_all(weighted))
}

/// Plain-value language-model loss.
pub fn lm_loss(
    cfg: &EncoderConfig,
    params: &Parameters,
    seq: &TokenSequence,
    masks: Option<&MaskSet>,
) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let pvars = ParamVars::insert(&mut tape, params, false);
    let gates = match masks {
        Some(m) => {
            let alphas = MaskAlphaVars::insert(&mut tape, m, false);
            Some(build_gates(&mut tape, &alphas, None)?)
        }
        None => None,
    };
    let loss = lm_loss_on_tape(&mut tape, cfg, &pvars, seq, gates.as_ref().map(|g| &g.vars))?;
    Ok(tape.value(loss).scalar_value())
}

/// Learning rates of the alternating descent/ascent schedule.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneRates {
    pub lr_theta: f64,
    pub lr_alpha: f64,
    pub eta_lambda: f64,
    pub eta_phi: f64,
}

impl Default for PruneRates {
    fn default() -> Self {
        PruneRates {
            lr_theta: 1e-3,
            lr_alpha: 0.05,
            eta_lambda: 0.02,
            eta_phi: 0.02,
        }
    }
}

/// Prune run description as read from a spec file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSpec {
    pub target: PruneTarget,
    #[serde(default = "default_init_log_alpha")]
    pub init_log_alpha: f64,
    #[serde(default)]
    pub rates: PruneRates,
    pub prune_steps: usize,
    pub pretrain_steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_pretrain_lr")]
    pub pretrain_lr: f64,
}

fn default_init_log_alpha() -> f64 {
    2.0
}
fn default_batch_size() -> usize {
    2
}
fn default_pretrain_lr() -> f64 {
    1e-3
}

fn group_violation(values: &Tensor, target: usize) -> f64 {
    values.data().iter().sum::<f64>() - target as f64
}

/// One alternating update: descend the total loss in (theta, log_alpha)
/// with sampled gates, then ascend (lambda, phi) using the same sampled
/// gate sums. A non-finite loss aborts with all state unchanged.
#[allow(clippy::too_many_arguments)]
pub fn prune_step(
    cfg: &EncoderConfig,
    params: &mut Parameters,
    masks: &mut MaskSet,
    lagrange: &mut LagrangeState,
    target: &PruneTarget,
    batch: &[TokenSequence],
    rates: &PruneRates,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    masks.validate(cfg)?;
    target.validate(cfg)?;
    if batch.is_empty() {
        return Err(Error::Data("prune_step: empty batch".into()));
    }

    let mut tape = Tape::new();
    let pvars = ParamVars::insert(&mut tape, params, true);
    let alphas = MaskAlphaVars::insert(&mut tape, masks, true);
    let noise = sample_noise(cfg, rng);
    let gates = build_gates(&mut tape, &alphas, Some(&noise))?;

    let mut lm_total: Option<Var> = None;
    for seq in batch {
        let l = lm_loss_on_tape(&mut tape, cfg, &pvars, seq, Some(&gates.vars))?;
        lm_total = Some(match lm_total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let lm_mean = tape.scale(lm_total.expect("nonempty batch"), 1.0 / batch.len() as f64);

    let constraint_on_tape = |tape: &mut Tape, z: Var, t: usize, (l, p): (f64, f64)| {
        let s = tape.sum_all(z);
        let v = tape.add_scalar(s, -(t as f64));
        let lin = tape.scale(v, l);
        let sq = tape.mul(v, v)?;
        let quad = tape.scale(sq, p);
        tape.add(lin, quad)
    };
    let mut total = lm_mean;
    for i in 0..cfg.num_layers {
        let h = constraint_on_tape(&mut tape, gates.vars.head[i], target.num_heads, lagrange.head[i])?;
        total = tape.add(total, h)?;
        let c = constraint_on_tape(
            &mut tape,
            gates.vars.int[i],
            target.intermediate_dim,
            lagrange.int[i],
        )?;
        total = tape.add(total, c)?;
    }
    let l = constraint_on_tape(&mut tape, gates.vars.layer, target.num_layers, lagrange.layer)?;
    total = tape.add(total, l)?;
    let h = constraint_on_tape(&mut tape, gates.vars.hidden, target.hidden_dim, lagrange.hidden)?;
    total = tape.add(total, h)?;

    let loss_value = tape.value(total).scalar_value();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("prune loss {loss_value}")));
    }
    let grads = tape.backward(total)?;
    let apply = |vars: &[Var], slots: &mut [&mut Tensor], lr: f64| {
        for (&v, slot) in vars.iter().zip(slots.iter_mut()) {
            if let Some(g) = grads.wrt(v) {
                let sd = slot.data_mut();
                for (x, gi) in sd.iter_mut().zip(g.data()) {
                    *x -= lr * gi;
                }
            }
        }
    };
    apply(
        &pvars.all_vars(),
        &mut params.tensors_mut(),
        rates.lr_theta,
    );
    apply(
        &alphas.all_vars(),
        &mut masks.all_tensors_mut(),
        rates.lr_alpha,
    );

    for i in 0..cfg.num_layers {
        update_multipliers(
            &mut lagrange.head[i],
            group_violation(&gates.values.head[i], target.num_heads),
            rates.eta_lambda,
            rates.eta_phi,
        );
        update_multipliers(
            &mut lagrange.int[i],
            group_violation(&gates.values.int[i], target.intermediate_dim),
            rates.eta_lambda,
            rates.eta_phi,
        );
    }
    update_multipliers(
        &mut lagrange.layer,
        group_violation(&gates.values.layer, target.num_layers),
        rates.eta_lambda,
        rates.eta_phi,
    );
    update_multipliers(
        &mut lagrange.hidden,
        group_violation(&gates.values.hidden, target.hidden_dim),
        rates.eta_lambda,
        rates.eta_phi,
    );
    if !lagrange.all_finite() {
        return Err(Error::NonFinite("lagrange multipliers".into()));
    }
    Ok(loss_value)
}

/// Indices of the k largest values, ties broken by lower index, returned
/// in ascending order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("finite mask values")
            .then(a.cmp(&b))
    });
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    keep
}

fn select_rows(t: &Tensor, keep: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(keep.len() * t.cols());
    for &r in keep {
        data.extend_from_slice(t.row(r));
    }
    Tensor::matrix(keep.len(), t.cols(), data).expect("row select")
}

fn select_cols(t: &Tensor, keep: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(keep.len() * t.rows());
    for r in 0..t.rows() {
        for &c in keep {
            data.push(t.at(r, c));
        }
    }
    Tensor::matrix(t.rows(), keep.len(), data).expect("col select")
}

/// Snap to the target architecture: per group keep the top-target units
/// by deterministic gate value and drop the rest, copying kept weights
/// unscaled into a dense smaller model.
pub fn snap_architecture(
    cfg: &EncoderConfig,
    params: &Parameters,
    masks: &MaskSet,
    target: &PruneTarget,
) -> Result<(EncoderConfig, Parameters)> {
    masks.validate(cfg)?;
    target.validate(cfg)?;
    let hd = cfg.head_dim();

    let det = |t: &Tensor| mask_deterministic(t);
    let keep_layers = top_k_indices(det(&masks.layer).data(), target.num_layers);
    let keep_hidden = top_k_indices(det(&masks.hidden).data(), target.hidden_dim);

    let mut layers = Vec::with_capacity(target.num_layers);
    for &li in &keep_layers {
        let src = &params.layers[li];
        let keep_heads = top_k_indices(det(&masks.head[li]).data(), target.num_heads);
        let keep_int = top_k_indices(det(&masks.int[li]).data(), target.intermediate_dim);
        let head_cols: Vec<usize> = keep_heads
            .iter()
            .flat_map(|&h| (h * hd)..((h + 1) * hd))
            .collect();
        layers.push(LayerParams {
            attn_norm: select_cols(&src.attn_norm, &keep_hidden),
            wq: select_cols(&select_rows(&src.wq, &keep_hidden), &head_cols),
            wk: select_cols(&select_rows(&src.wk, &keep_hidden), &head_cols),
            wv: select_cols(&select_rows(&src.wv, &keep_hidden), &head_cols),
            wo: select_cols(&select_rows(&src.wo, &head_cols), &keep_hidden),
            ffn_norm: select_cols(&src.ffn_norm, &keep_hidden),
            w_gate: select_cols(&select_rows(&src.w_gate, &keep_hidden), &keep_int),
            w_up: select_cols(&select_rows(&src.w_up, &keep_hidden), &keep_int),
            w_down: select_cols(&select_rows(&src.w_down, &keep_int), &keep_hidden),
        });
    }

    let new_cfg = EncoderConfig {
        num_layers: target.num_layers,
        hidden_dim: target.hidden_dim,
        num_heads: target.num_heads,
        intermediate_dim: target.intermediate_dim,
        ..cfg.clone()
    };
    new_cfg.validate()?;
    let new_params = Parameters {
        token_embedding: select_cols(&params.token_embedding, &keep_hidden),
        layers,
        final_norm: select_cols(&params.final_norm, &keep_hidden),
    };
    Ok((new_cfg, new_params))
}

/// Plain language-model training of a snapped model. Deterministic for a
/// given seed; returns the per-step loss history.
pub fn continued_pretrain(
    cfg: &EncoderConfig,
    params: &mut Parameters,
    corpus: &[TokenSequence],
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Data("continued_pretrain: empty corpus".into()));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let mut rng = rng_for(seed, "pretrain");
    let mut opt = AdamState::for_params(params);
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch: Vec<&TokenSequence> = (0..batch_size)
            .map(|_| &corpus[rng.gen_range(0..corpus.len())])
            .collect();
        let mut tape = Tape::new();
        let pvars = ParamVars::insert(&mut tape, params, true);
        let mut total: Option<Var> = None;
        for seq in &batch {
            let l = lm_loss_on_tape(&mut tape, cfg, &pvars, seq, None)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        let mean = tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64);
        let loss_value = tape.value(mean).scalar_value();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("pretrain loss {loss_value}")));
        }
        let grads = tape.backward(mean)?;
        let grad_tensors: Vec<Tensor> = pvars
            .all_vars()
            .iter()
            .zip(params.named_tensors())
            .map(|(&v, (_, t))| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        opt.step(&mut params.tensors_mut(), &grad_tensors, lr)?;
        history.push(loss_value);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{AttentionMode, Pooling};
    use rand_chacha::rand_core::SeedableRng;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn lm_cfg(layers: usize, hidden: usize, heads: usize, int: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: layers,
            hidden_dim: hidden,
            num_heads: heads,
            intermediate_dim: int,
            vocab_size: 16,
            max_positions: 16,
            rope_theta: 10_000.0,
            attention_mode: AttentionMode::Unidirectional,
            pooling: Pooling::Mean,
        }
    }

    #[test]
    fn deterministic_gate_closed_forms() {
        let z = mask_deterministic(&Tensor::matrix(1, 3, vec![0.0, 20.0, -20.0]).unwrap());
        approx(z.data()[0], 0.5, 1e-12);
        assert_eq!(z.data()[1], 1.0);
        assert_eq!(z.data()[2], 0.0);
    }

    #[test]
    fn deterministic_gate_is_monotone_in_log_alpha() {
        let grid: Vec<f64> = (-40..=40).map(|i| i as f64 / 10.0).collect();
        let z = mask_deterministic(&Tensor::matrix(1, grid.len(), grid).unwrap());
        for w in z.data().windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn sampled_gate_at_median_noise() {
        // u = 0.5 kills the noise term: s = sigmoid(log_alpha / beta)
        for a in [-1.5, 0.0, 0.3, 2.0] {
            let s = sigmoid(a / BETA);
            let expected = (s * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0);
            approx(mask_sample_value(a, 0.5), expected, 1e-12);
        }
    }

    #[test]
    fn sampled_gate_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let a = rng.gen_range(-6.0..6.0);
            let u = rng.gen_range(1e-9..1.0 - 1e-9);
            let z = mask_sample_value(a, u);
            assert!((0.0..=1.0).contains(&z));
        }
    }

    #[test]
    fn sampled_gate_mean_matches_quadrature_oracle() {
        // E[z] at log_alpha = 0 by numerical integration over u
        let n = 2_000_001usize;
        let mut oracle = 0.0;
        for i in 0..n {
            let u = (i as f64 + 0.5) / n as f64;
            oracle += mask_sample_value(0.0, u);
        }
        oracle /= n as f64;

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples = 100_000;
        let mut mean = 0.0;
        for _ in 0..samples {
            let u = rng.gen_range(1e-9..1.0 - 1e-9);
            mean += mask_sample_value(0.0, u);
        }
        mean /= samples as f64;
        approx(mean, oracle, 0.01);
    }

    #[test]
    fn constraint_loss_closed_forms() {
        assert_eq!(constraint_loss(12.0, 12.0, 3.0, 9.0), 0.0);
        approx(constraint_loss(14.0, 12.0, 0.5, 2.0), 9.0, 1e-12);
    }

    #[test]
    fn constraint_loss_derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let z: f64 = rng.gen_range(0.0..20.0);
            let t: f64 = rng.gen_range(0.0..10.0);
            let l: f64 = rng.gen_range(-2.0..2.0);
            let p: f64 = rng.gen_range(0.0..3.0);
            let analytic = l + 2.0 * p * (z - t);
            let h = 1e-6;
            let fd = (constraint_loss(z + h, t, l, p) - constraint_loss(z - h, t, l, p)) / (2.0 * h);
            approx(analytic, fd, 1e-8 * (1.0 + analytic.abs()));
        }
    }

    #[test]
    fn constraint_loss_quadratic_lower_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let z: f64 = rng.gen_range(-5.0..25.0);
            let t: f64 = rng.gen_range(0.0..10.0);
            let l: f64 = rng.gen_range(-3.0..3.0);
            let p: f64 = rng.gen_range(0.01..5.0);
            let bound = -l * l / (4.0 * p);
            assert!(constraint_loss(z, t, l, p) >= bound - 1e-12);
        }
    }

    #[test]
    fn total_loss_is_a_plain_sum() {
        let heads = [0.3, 0.7];
        let ints = [0.1, 0.2];
        let base = prune_total_loss(1.5, &heads, &ints, 0.4, 0.9);
        approx(base, 1.5 + 1.0 + 0.3 + 0.4 + 0.9, 1e-12);
        // additivity: doubling one term raises the total by that amount
        let more = prune_total_loss(1.5, &[0.6, 0.7], &ints, 0.4, 0.9);
        approx(more - base, 0.3, 1e-12);
        // random instance against an independent fold
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let oracle = 0.25 + h.iter().fold(0.0, |a, x| a + x) + c.iter().fold(0.0, |a, x| a + x)
            + 0.5
            + 0.75;
        approx(prune_total_loss(0.25, &h, &c, 0.5, 0.75), oracle, 1e-12);
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        // zero embedding makes every logit zero, hence a uniform softmax
        let cfg = lm_cfg(2, 8, 2, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = Parameters::init(&cfg, &mut rng);
        params.token_embedding = Tensor::zeros(&[cfg.vocab_size, cfg.hidden_dim]);
        let seq = TokenSequence::unpadded(vec![1, 2, 3, 4]);
        let loss = lm_loss(&cfg, &params, &seq, None).unwrap();
        approx(loss, (cfg.vocab_size as f64).ln(), 1e-12);
    }

    #[test]
    fn lm_loss_matches_manual_cross_entropy() {
        let cfg = lm_cfg(2, 8, 2, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = Parameters::init(&cfg, &mut rng);
        let seq = TokenSequence::unpadded(vec![3, 1, 7, 2, 9]);
        let ours = lm_loss(&cfg, &params, &seq, None).unwrap();

        // independent head: recompute logits and cross-entropy by hand
        let mut tape = Tape::no_grad();
        let pvars = ParamVars::insert(&mut tape, &params, false);
        let states = encoder::forward_states(&mut tape, &cfg, &pvars, &seq, None).unwrap();
        let states = tape.value(states).clone();
        let n = seq.ids.len();
        let mut total = 0.0;
        for i in 0..n - 1 {
            let logits: Vec<f64> = (0..cfg.vocab_size)
                .map(|v| {
                    (0..cfg.hidden_dim)
                        .map(|d| states.at(i, d) * params.token_embedding.at(v, d))
                        .sum()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
            total += lse - logits[seq.ids[i + 1]];
        }
        approx(ours, total / (n - 1) as f64, 1e-10);
    }

    #[test]
    fn lm_loss_rejects_short_sequences() {
        let cfg = lm_cfg(1, 8, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = Parameters::init(&cfg, &mut rng);
        let seq = TokenSequence::unpadded(vec![3]);
        assert!(lm_loss(&cfg, &params, &seq, None).is_err());
    }

    #[test]
    fn lm_loss_rejects_bidirectional_attention() {
        let mut cfg = lm_cfg(1, 8, 2, 8);
        cfg.attention_mode = AttentionMode::Bidirectional;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = Parameters::init(&cfg, &mut rng);
        let seq = TokenSequence::unpadded(vec![3, 4]);
        assert!(lm_loss(&cfg, &params, &seq, None).is_err());
    }

    fn saturated_masks(cfg: &EncoderConfig) -> MaskSet {
        // +20 saturates the clamp at exactly 1.0
        MaskSet {
            head: (0..cfg.num_layers)
                .map(|_| Tensor::full(&[1, cfg.num_heads], 20.0))
                .collect(),
            int: (0..cfg.num_layers)
                .map(|_| Tensor::full(&[1, cfg.intermediate_dim], 20.0))
                .collect(),
            layer: Tensor::full(&[1, cfg.num_layers], 20.0),
            hidden: Tensor::full(&[1, cfg.hidden_dim], 20.0),
        }
    }

    fn forward_values(
        cfg: &EncoderConfig,
        params: &Parameters,
        seq: &TokenSequence,
        masks: Option<&MaskSet>,
    ) -> Tensor {
        let mut tape = Tape::no_grad();
        let pvars = ParamVars::insert(&mut tape, params, false);
        let gates = masks.map(|m| {
            let alphas = MaskAlphaVars::insert(&mut tape, m, false);
            build_gates(&mut tape, &alphas, None).unwrap()
        });
        let states =
            encoder::forward_states(&mut tape, cfg, &pvars, seq, gates.as_ref().map(|g| &g.vars))
                .unwrap();
        tape.value(states).clone()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_head_gate_equals_removing_the_head() {
        let cfg = lm_cfg(2, 8, 2, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = Parameters::init(&cfg, &mut rng);
        let seq = TokenSequence::unpadded(vec![3, 1, 7, 2]);
        let mut masks = saturated_masks(&cfg);
        masks.head[0].data_mut()[1] = -20.0; // gate head 1 of layer 0 closed

        // removal: a closed head contributes nothing, identical to
        // zeroing its rows of the output projection
        let mut removed = params.clone();
        let hd = cfg.head_dim();
        for r in hd..2 * hd {
            for c in 0..cfg.hidden_dim {
                removed.layers[0].wo.set(r, c, 0.0);
            }
        }
        let masked = forward_values(&cfg, &params, &seq, Some(&masks));
        let physical = forward_values(&cfg, &removed, &seq, None);
        assert!(max_abs_diff(&masked, &physical) <= 1e-12);
    }

    #[test]
    fn zero_int_gate_equals_removing_the_channel() {
        let cfg = lm_cfg(2, 8, 2, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = Parameters::init(&cfg, &mut rng);
        let seq = TokenSequence::unpadded(vec![3, 1, 7, 2]);
        let channel = 5;
        let mut masks = saturated_masks(&cfg);
        masks.int[1].data_mut()[channel] = -20.0;

        // physically drop the channel from layer 1
        let keep: Vec<usize> = (0..cfg.intermediate_dim).filter(|&c| c != channel).collect();
        let mut removed = params.clone();
        removed.layers[1].w_gate = select_cols(&params.layers[1].w_gate, &keep);
        removed.layers[1].w_up = select_cols(&params.layers[1].w_up, &keep);
        removed.layers[1].w_down = select_rows(&params.layers[1].w_down, &keep);
        let small_cfg = EncoderConfig {
            intermediate_dim: cfg.intermediate_dim - 1,
            ..cfg.clone()
        };
        // the config width applies to every layer, so drop the same
        // channel from layer 0 and gate it off there as well
        removed.layers[0].w_gate = select_cols(&params.layers[0].w_gate, &keep);
        removed.layers[0].w_up = select_cols(&params.layers[0].w_up, &keep);
        removed.layers[0].w_down = select_rows(&params.layers[0].w_down, &keep);
        let mut masks0 = masks.clone();
        masks0.int[0].data_mut()[channel] = -20.0;

        let masked = forward_values(&cfg, &params, &seq, Some(&masks0));
        let physical = forward_values(&small_cfg, &removed, &seq, None);
        assert!(max_abs_diff(&masked, &physical) <= 1e-12);
    }

    #[test]
    fn zero_layer_gate_equals_removing_the_block() {
        let cfg = lm_cfg(3, 8, 2, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = Parameters::init(&cfg, &mut rng);
        let seq = TokenSequence::unpadded(vec![3, 1, 7, 2]);
        let mut masks = saturated_masks(&cfg);
        masks.layer.data_mut()[1] = -20.0;

        let mut removed = params.clone();
        removed.layers.remove(1);
        let small_cfg = EncoderConfig {
            num_layers: 2,
            ..cfg.clone()
        };
        let masked = forward_values(&cfg, &params, &seq, Some(&masks));
        let physical = forward_values(&small_cfg, &removed, &seq, None);
        assert!(max_abs_diff(&masked, &physical) <= 1e-12);
    }

    #[test]
    fn total_loss_gradient_wrt_log_alpha_matches_finite_differences() {
        use crate::gradcheck::grad_check;
        let cfg = lm_cfg(1, 8, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = Parameters::init(&cfg, &mut rng);
        let seq = TokenSequence::unpadded(vec![3, 1, 7, 2]);
        // common random numbers: noise fixed across evaluations, drawn in
        // the mid range so no gate touches the clamp boundaries
        let mid_noise = |n: usize, rng: &mut ChaCha8Rng| {
            let data = (0..n)
                .map(|_| {
                    let u: f64 = rng.gen_range(0.35..0.65);
                    u.ln() - (1.0 - u).ln()
                })
                .collect();
            Tensor::matrix(1, n, data).unwrap()
        };
        let noise = MaskSet {
            head: vec![mid_noise(cfg.num_heads, &mut rng)],
            int: vec![mid_noise(cfg.intermediate_dim, &mut rng)],
            layer: mid_noise(cfg.num_layers, &mut rng),
            hidden: mid_noise(cfg.hidden_dim, &mut rng),
        };
        let target = PruneTarget {
            num_heads: 1,
            hidden_dim: 4,
            num_layers: 1,
            intermediate_dim: 4,
        };
        let lagrange = LagrangeState {
            head: vec![(0.3, 0.2)],
            int: vec![(0.1, 0.4)],
            layer: (0.2, 0.1),
            hidden: (0.5, 0.3),
        };

        let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            let pvars = ParamVars::insert(tape, &params, false);
            let alphas = MaskAlphaVars {
                head: vec![vars[0]],
                int: vec![vars[1]],
                layer: vars[2],
                hidden: vars[3],
            };
            let gates = build_gates(tape, &alphas, Some(&noise))?;
            let lm = lm_loss_on_tape(tape, &cfg, &pvars, &seq, Some(&gates.vars))?;
            let mut total = lm;
            let groups = [
                (gates.vars.head[0], target.num_heads, lagrange.head[0]),
                (gates.vars.int[0], target.intermediate_dim, lagrange.int[0]),
                (gates.vars.layer, target.num_layers, lagrange.layer),
                (gates.vars.hidden, target.hidden_dim, lagrange.hidden),
            ];
            for (z, t, (l, p)) in groups {
                let s = tape.sum_all(z);
                let v = tape.add_scalar(s, -(t as f64));
                let lin = tape.scale(v, l);
                let sq = tape.mul(v, v)?;
                let quad = tape.scale(sq, p);
                let term = tape.add(lin, quad)?;
                total = tape.add(total, term)?;
            }
            Ok(total)
        };
        let alpha_point = |n: usize, seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..n).map(|_| r.gen_range(-0.3..0.3)).collect();
            Tensor::matrix(1, n, data).unwrap()
        };
        let points = vec![
            alpha_point(cfg.num_heads, 21),
            alpha_point(cfg.intermediate_dim, 22),
            alpha_point(cfg.num_layers, 23),
            alpha_point(cfg.hidden_dim, 24),
        ];
        let err = grad_check(&f, &points, 1e-5, None, 0).unwrap();
        assert!(err <= 1e-4, "err = {err}");
    }

    #[test]
    fn multiplier_ascent_closed_form() {
        let mut pair = (0.0, 0.0);
        update_multipliers(&mut pair, 2.0, 0.1, 0.05);
        approx(pair.0, 0.2, 1e-12);
        approx(pair.1, 0.2, 1e-12);
    }

    fn tiny_prune_setup(seed: u64) -> (EncoderConfig, Parameters, MaskSet, LagrangeState, PruneTarget, Vec<TokenSequence>) {
        let cfg = lm_cfg(1, 8, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Parameters::init(&cfg, &mut rng);
        let masks = MaskSet::init(&cfg, 2.0, &mut rng);
        let lagrange = LagrangeState::zeros(cfg.num_layers);
        let target = PruneTarget {
            num_heads: 2,
            hidden_dim: 4,
            num_layers: 1,
            intermediate_dim: 4,
        };
        let batch = vec![
            TokenSequence::unpadded(vec![3, 1, 7, 2, 9, 4]),
            TokenSequence::unpadded(vec![5, 8, 2, 6]),
        ];
        (cfg, params, masks, lagrange, target, batch)
    }

    #[test]
    fn zero_rates_leave_state_bit_identical() {
        let (cfg, mut params, mut masks, mut lagrange, target, batch) = tiny_prune_setup(12);
        let before = (params.clone(), masks.clone(), lagrange.clone());
        let rates = PruneRates {
            lr_theta: 0.0,
            lr_alpha: 0.0,
            eta_lambda: 0.0,
            eta_phi: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        prune_step(
            &cfg, &mut params, &mut masks, &mut lagrange, &target, &batch, &rates, &mut rng,
        )
        .unwrap();
        assert_eq!(before.0, params);
        assert_eq!(before.1, masks);
        assert_eq!(before.2, lagrange);
    }

    #[test]
    fn two_hundred_steps_drive_head_count_toward_target() {
        let (cfg, mut params, mut masks, mut lagrange, target, batch) = tiny_prune_setup(13);
        let rates = PruneRates::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            prune_step(
                &cfg, &mut params, &mut masks, &mut lagrange, &target, &batch, &rates, &mut rng,
            )
            .unwrap();
        }
        let z_sum: f64 = mask_deterministic(&masks.head[0]).data().iter().sum();
        assert!(
            (z_sum - target.num_heads as f64).abs() <= 0.5,
            "head gate sum {z_sum}"
        );
    }

    #[test]
    fn top_k_selection_with_ties() {
        assert_eq!(top_k_indices(&[0.9, 0.1, 0.8, 0.2], 2), vec![0, 2]);
        assert_eq!(top_k_indices(&[0.5, 0.5, 0.5], 2), vec![0, 1]);
    }

    #[test]
    fn snap_produces_the_target_config_and_param_count() {
        let cfg = lm_cfg(3, 8, 4, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let params = Parameters::init(&cfg, &mut rng);
        let masks = MaskSet::init(&cfg, 0.0, &mut rng);
        let target = PruneTarget {
            num_heads: 2,
            hidden_dim: 4,
            num_layers: 2,
            intermediate_dim: 6,
        };
        let (snapped_cfg, snapped) = snap_architecture(&cfg, &params, &masks, &target).unwrap();
        assert_eq!(snapped_cfg.num_heads, target.num_heads);
        assert_eq!(snapped_cfg.hidden_dim, target.hidden_dim);
        assert_eq!(snapped_cfg.num_layers, target.num_layers);
        assert_eq!(snapped_cfg.intermediate_dim, target.intermediate_dim);
        assert_eq!(snapped.num_params(), encoder::param_count(&snapped_cfg));
        snapped_cfg.validate().unwrap();
    }

    #[test]
    fn snap_keeps_the_highest_gates() {
        let cfg = lm_cfg(1, 8, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let params = Parameters::init(&cfg, &mut rng);
        let mut masks = saturated_masks(&cfg);
        // head gates 0.9-ish for heads 0 and 2, closed for 1 and 3
        masks.head[0] = Tensor::matrix(1, 4, vec![2.0, -2.0, 1.5, -1.0]).unwrap();
        let target = PruneTarget {
            num_heads: 2,
            hidden_dim: 4,
            num_layers: 1,
            intermediate_dim: 8,
        };
        let (_, snapped) = snap_architecture(&cfg, &params, &masks, &target).unwrap();
        // kept heads 0 and 2: wq columns are those heads' blocks, rows the
        // top-4 hidden channels (all gates saturated, ties keep 0..4)
        let hd = cfg.head_dim();
        for r in 0..4 {
            for (out_c, src_c) in [(0, 0), (hd, 2 * hd)] {
                for j in 0..hd {
                    assert_eq!(snapped.layers[0].wq.at(r, out_c + j), params.layers[0].wq.at(r, src_c + j));
                }
            }
        }
    }

    #[test]
    fn snap_rejects_inconsistent_targets() {
        let cfg = lm_cfg(2, 8, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let params = Parameters::init(&cfg, &mut rng);
        let masks = MaskSet::init(&cfg, 0.0, &mut rng);
        // more heads than the source has
        let too_many = PruneTarget {
            num_heads: 8,
            hidden_dim: 16,
            num_layers: 2,
            intermediate_dim: 8,
        };
        assert!(snap_architecture(&cfg, &params, &masks, &too_many).is_err());
        // head dim would change: 8 hidden / 4 heads = 2, but 6/3 = 2 is
        // fine while 6/2 = 3 is not
        let wrong_hd = PruneTarget {
            num_heads: 2,
            hidden_dim: 6,
            num_layers: 2,
            intermediate_dim: 8,
        };
        assert!(snap_architecture(&cfg, &params, &masks, &wrong_hd).is_err());
    }

    #[test]
    fn pretrain_zero_steps_leaves_parameters_unchanged() {
        let cfg = lm_cfg(1, 8, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = Parameters::init(&cfg, &mut rng);
        let before = params.clone();
        let corpus = vec![TokenSequence::unpadded(vec![1, 2, 3])];
        let hist = continued_pretrain(&cfg, &mut params, &corpus, 0, 1, 1e-3, 0).unwrap();
        assert!(hist.is_empty());
        assert_eq!(before, params);
    }

    #[test]
    fn pretrain_reduces_loss_and_is_seed_deterministic() {
        let cfg = lm_cfg(1, 8, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let params0 = Parameters::init(&cfg, &mut rng);
        let corpus: Vec<TokenSequence> = (0..4)
            .map(|i| TokenSequence::unpadded(vec![i + 1, i + 2, i + 3, i + 4]))
            .collect();
        let mut a = params0.clone();
        let hist_a = continued_pretrain(&cfg, &mut a, &corpus, 60, 2, 3e-3, 5).unwrap();
        let mut b = params0.clone();
        let hist_b = continued_pretrain(&cfg, &mut b, &corpus, 60, 2, 3e-3, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(hist_a, hist_b);
        let early: f64 = hist_a[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = hist_a[hist_a.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(late < early, "loss did not drop: {early} -> {late}");
        assert!(continued_pretrain(&cfg, &mut a, &[], 1, 1, 1e-3, 0).is_err());
    }
}
