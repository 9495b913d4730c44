//! Reverse-mode differentiation on a per-step tape.
//!
//! A [`Tape`] is an append-only arena of primitive applications. Forward
//! values are computed eagerly; [`Tape::backward`] walks the records in
//! reverse and accumulates gradients for every leaf flagged as requiring
//! them. Tapes are built per training step and dropped after the update.
//!
//! Records are appended in application order, so topological order holds
//! by construction: every input of a record precedes it.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a value on a tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    /// Row-broadcast multiply: (m x n) * (1 x n).
    MulRow(usize, usize),
    /// Multiply a tensor by a one-element var.
    MulByScalarVar(usize, usize),
    RowSoftmax(usize),
    RowLogSumExp(usize),
    /// Pick one column per row: out[i, 0] = a[i, idx[i]].
    GatherCols(usize, Vec<usize>),
    RmsNorm(usize, f64),
    Silu(usize),
    Sigmoid(usize),
    /// Gather rows of a table by token id.
    EmbedLookup(usize, Vec<usize>),
    SliceCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
    /// Where mask is set, output the fill value instead of the input.
    MaskedFill(usize, Vec<bool>),
    /// Rotary position map with precomputed per-row cos/sin tables.
    Rope(usize, Tensor, Tensor),
    /// Row-wise L2 normalization.
    NormalizeRows(usize),
    Clamp(usize, f64, f64),
    SumAll(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, addressed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

/// Append-only record of primitive applications.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values but never tracks gradients. Used for
    /// evaluation-only forward passes.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Insert a leaf tensor. `requires_grad` marks it as a target for
    /// [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    // ---- primitives ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, n) = (ta.rows(), tb.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(ta, tb, &mut out);
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.at(i, j);
            }
        }
        let rg = self.needs(&[a.0]);
        let val = Tensor::matrix(n, m, out).expect("transpose shape");
        self.push(val, Op::Transpose(a.0), rg)
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::ShapeMismatch {
                op: name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.needs(&[a.0]);
        self.push(Tensor::new(shape, data).expect("scale"), Op::Scale(a.0, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x + c).collect();
        let shape = t.shape().to_vec();
        let rg = self.needs(&[a.0]);
        self.push(
            Tensor::new(shape, data).expect("add_scalar"),
            Op::AddScalar(a.0),
            rg,
        )
    }

    /// Broadcast a row vector (1 x n) across every row of `a` (m x n),
    /// multiplying elementwise.
    pub fn mul_row(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        if tw.rows() != 1 || ta.cols() != tw.cols() {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                left: ta.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let (m, n) = (ta.rows(), ta.cols());
        let wd = tw.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(ta.at(i, j) * wd[j]);
            }
        }
        let rg = self.needs(&[a.0, w.0]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MulRow(a.0, w.0), rg))
    }

    /// Multiply every element of `a` by the single element of `s`.
    pub fn mul_by_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if !ts.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "mul_by_scalar_var",
                left: self.value(a).shape().to_vec(),
                right: ts.shape().to_vec(),
            });
        }
        let sv = ts.scalar_value();
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * sv).collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs(&[a.0, s.0]);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulByScalarVar(a.0, s.0), rg))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = t.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / sum));
        }
        let rg = self.needs(&[a.0]);
        self.push(
            Tensor::matrix(m, n, out).expect("softmax"),
            Op::RowSoftmax(a.0),
            rg,
        )
    }

    /// Row-wise log-sum-exp with max subtraction, output m x 1.
    pub fn row_logsumexp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.rows();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = t.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
            out.push(mx + sum.ln());
        }
        let rg = self.needs(&[a.0]);
        self.push(
            Tensor::matrix(m, 1, out).expect("lse"),
            Op::RowLogSumExp(a.0),
            rg,
        )
    }

    /// out[i, 0] = a[i, idx[i]].
    pub fn gather_cols(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        if idx.len() != m {
            return Err(Error::invalid(format!(
                "gather_cols: {} indices for {} rows",
                idx.len(),
                m
            )));
        }
        let mut out = Vec::with_capacity(m);
        for (i, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(Error::invalid(format!(
                    "gather_cols: index {} out of range for {} cols",
                    j, n
                )));
            }
            out.push(t.at(i, j));
        }
        let rg = self.needs(&[a.0]);
        Ok(self.push(Tensor::matrix(m, 1, out)?, Op::GatherCols(a.0, idx), rg))
    }

    /// Row-wise RMS normalization: y = x / sqrt(mean(x^2) + eps).
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = t.row(i);
            let ms = row.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + eps).sqrt();
            out.extend(row.iter().map(|&x| x * r));
        }
        let rg = self.needs(&[a.0]);
        self.push(
            Tensor::matrix(m, n, out).expect("rms_norm"),
            Op::RmsNorm(a.0, eps),
            rg,
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| x * (1.0 / (1.0 + (-x).exp())))
            .collect();
        let shape = t.shape().to_vec();
        let rg = self.needs(&[a.0]);
        self.push(Tensor::new(shape, data).expect("silu"), Op::Silu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let shape = t.shape().to_vec();
        let rg = self.needs(&[a.0]);
        self.push(
            Tensor::new(shape, data).expect("sigmoid"),
            Op::Sigmoid(a.0),
            rg,
        )
    }

    /// Gather rows `ids` from an embedding table (vocab x dim).
    pub fn embed_lookup(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in &ids {
            if id >= v {
                return Err(Error::invalid(format!(
                    "embed_lookup: token id {} out of vocab {}",
                    id, v
                )));
            }
            out.extend_from_slice(t.row(id));
        }
        let rg = self.needs(&[table.0]);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out)?,
            Op::EmbedLookup(table.0, ids),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        if start + len > n || len == 0 {
            return Err(Error::invalid(format!(
                "slice_cols: [{}, {}) out of {} cols",
                start,
                start + len,
                n
            )));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let rg = self.needs(&[a.0]);
        Ok(self.push(
            Tensor::matrix(m, len, out)?,
            Op::SliceCols(a.0, start, len),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: no inputs"));
        }
        let m = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let rg = self.needs(&ids);
        Ok(self.push(Tensor::matrix(m, total, out)?, Op::ConcatCols(ids), rg))
    }

    /// Replace masked elements with `value`; gradient flows only through
    /// unmasked positions.
    pub fn masked_fill(&mut self, a: Var, mask: Vec<bool>, value: f64) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(Error::invalid(format!(
                "masked_fill: mask of {} for {} elements",
                mask.len(),
                t.len()
            )));
        }
        let data = t
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let shape = t.shape().to_vec();
        let rg = self.needs(&[a.0]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::MaskedFill(a.0, mask),
            rg,
        ))
    }

    /// Rotary position map. `a` is (rows x d) with even d; `cos`/`sin` are
    /// (rows x d/2) tables. Pairs (j, j + d/2) are rotated per row.
    pub fn rope(&mut self, a: Var, cos: Tensor, sin: Tensor) -> Result<Var> {
        let t = self.value(a);
        let (m, d) = (t.rows(), t.cols());
        let h = d / 2;
        if d % 2 != 0 || cos.rows() != m || cos.cols() != h || sin.rows() != m || sin.cols() != h {
            return Err(Error::ShapeMismatch {
                op: "rope",
                left: t.shape().to_vec(),
                right: cos.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            for j in 0..h {
                let (c, s) = (cos.at(i, j), sin.at(i, j));
                let (x0, x1) = (t.at(i, j), t.at(i, j + h));
                out[i * d + j] = x0 * c - x1 * s;
                out[i * d + j + h] = x0 * s + x1 * c;
            }
        }
        let rg = self.needs(&[a.0]);
        Ok(self.push(Tensor::matrix(m, d, out)?, Op::Rope(a.0, cos, sin), rg))
    }

    /// Row-wise L2 normalization; rejects zero rows.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = t.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateEmbedding(format!(
                    "normalize_rows: row {} is the zero vector",
                    i
                )));
            }
            out.extend(row.iter().map(|&x| x / norm));
        }
        let rg = self.needs(&[a.0]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::NormalizeRows(a.0), rg))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let shape = t.shape().to_vec();
        let rg = self.needs(&[a.0]);
        self.push(
            Tensor::new(shape, data).expect("clamp"),
            Op::Clamp(a.0, lo, hi),
            rg,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.needs(&[a.0]);
        self.push(Tensor::scalar(s), Op::SumAll(a.0), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Every leaf with the
    /// requires-gradient flag receives d(root)/d(leaf).
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::invalid(format!(
                "backward: root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.backward_with_seed(root, Tensor::scalar(1.0))
    }

    /// Reverse sweep seeded with an upstream gradient of the root's shape.
    /// Used to compose tapes (a downstream tape provides the seed).
    pub fn backward_with_seed(&mut self, root: Var, seed: Tensor) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::invalid("backward on a no-grad tape"));
        }
        if !self.value(root).same_shape(&seed) {
            return Err(Error::ShapeMismatch {
                op: "backward_with_seed",
                left: self.value(root).shape().to_vec(),
                right: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            // Leaves keep their accumulated gradient.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], target: usize, delta: Tensor) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // dA = G * B^T ; dB = A^T * G
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    let bt = transpose_tensor(tb);
                    let mut da = vec![0.0; ta.len()];
                    matmul_into(g, &bt, &mut da);
                    self.add_grad(
                        grads,
                        *a,
                        Tensor::new(ta.shape().to_vec(), da).expect("matmul da"),
                    );
                }
                if self.nodes[*b].requires_grad {
                    let at = transpose_tensor(ta);
                    let mut db = vec![0.0; tb.len()];
                    matmul_into(&at, g, &mut db);
                    self.add_grad(
                        grads,
                        *b,
                        Tensor::new(tb.shape().to_vec(), db).expect("matmul db"),
                    );
                }
            }
            Op::Transpose(a) => {
                self.add_grad(grads, *a, transpose_tensor(g));
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                let neg = map_tensor(g, |x| -x);
                self.add_grad(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.add_grad(grads, *a, zip_tensor(g, tb, |gv, y| gv * y));
                self.add_grad(grads, *b, zip_tensor(g, ta, |gv, x| gv * x));
            }
            Op::Scale(a, c) => {
                self.add_grad(grads, *a, map_tensor(g, |x| x * c));
            }
            Op::AddScalar(a) => {
                self.add_grad(grads, *a, g.clone());
            }
            Op::MulRow(a, w) => {
                let (ta, tw) = (&self.nodes[*a].value, &self.nodes[*w].value);
                let (m, n) = (ta.rows(), ta.cols());
                if self.nodes[*a].requires_grad {
                    let wd = tw.data();
                    let mut da = Vec::with_capacity(m * n);
                    for r in 0..m {
                        for c in 0..n {
                            da.push(g.at(r, c) * wd[c]);
                        }
                    }
                    self.add_grad(grads, *a, Tensor::matrix(m, n, da).expect("mul_row da"));
                }
                if self.nodes[*w].requires_grad {
                    let mut dw = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dw[c] += g.at(r, c) * ta.at(r, c);
                        }
                    }
                    self.add_grad(grads, *w, Tensor::matrix(1, n, dw).expect("mul_row dw"));
                }
            }
            Op::MulByScalarVar(a, s) => {
                let (ta, ts) = (&self.nodes[*a].value, &self.nodes[*s].value);
                let sv = ts.scalar_value();
                self.add_grad(grads, *a, map_tensor(g, |x| x * sv));
                let ds: f64 = g.data().iter().zip(ta.data()).map(|(gv, x)| gv * x).sum();
                self.add_grad(grads, *s, Tensor::scalar(ds));
            }
            Op::RowSoftmax(a) => {
                // dx = p ⊙ (g − (g·p)) per row, with p the forward output.
                let p = &self.nodes[i].value;
                let (m, n) = (p.rows(), p.cols());
                let mut dx = Vec::with_capacity(m * n);
                for r in 0..m {
                    let prow = p.row(r);
                    let grow = g.row(r);
                    let dot: f64 = prow.iter().zip(grow).map(|(pv, gv)| pv * gv).sum();
                    dx.extend(prow.iter().zip(grow).map(|(pv, gv)| pv * (gv - dot)));
                }
                self.add_grad(grads, *a, Tensor::matrix(m, n, dx).expect("softmax dx"));
            }
            Op::RowLogSumExp(a) => {
                // dx = softmax(x) * g_row
                let x = &self.nodes[*a].value;
                let (m, n) = (x.rows(), x.cols());
                let mut dx = Vec::with_capacity(m * n);
                for r in 0..m {
                    let row = x.row(r);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    let gr = g.at(r, 0);
                    dx.extend(exps.iter().map(|e| gr * e / sum));
                }
                self.add_grad(grads, *a, Tensor::matrix(m, n, dx).expect("lse dx"));
            }
            Op::GatherCols(a, idx) => {
                let x = &self.nodes[*a].value;
                let (m, n) = (x.rows(), x.cols());
                let mut dx = vec![0.0; m * n];
                for (r, &c) in idx.iter().enumerate() {
                    dx[r * n + c] += g.at(r, 0);
                }
                self.add_grad(grads, *a, Tensor::matrix(m, n, dx).expect("gather dx"));
            }
            Op::RmsNorm(a, eps) => {
                let x = &self.nodes[*a].value;
                let (m, n) = (x.rows(), x.cols());
                let mut dx = Vec::with_capacity(m * n);
                for r in 0..m {
                    let row = x.row(r);
                    let grow = g.row(r);
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let gdotx: f64 = grow.iter().zip(row).map(|(gv, xv)| gv * xv).sum();
                    let coef = gdotx * inv * inv * inv / n as f64;
                    dx.extend(
                        row.iter()
                            .zip(grow)
                            .map(|(&xv, &gv)| gv * inv - xv * coef),
                    );
                }
                self.add_grad(grads, *a, Tensor::matrix(m, n, dx).expect("rms dx"));
            }
            Op::Silu(a) => {
                let x = &self.nodes[*a].value;
                let dx = zip_tensor(g, x, |gv, xv| {
                    let s = 1.0 / (1.0 + (-xv).exp());
                    gv * s * (1.0 + xv * (1.0 - s))
                });
                self.add_grad(grads, *a, dx);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let dx = zip_tensor(g, y, |gv, yv| gv * yv * (1.0 - yv));
                self.add_grad(grads, *a, dx);
            }
            Op::EmbedLookup(table, ids) => {
                let t = &self.nodes[*table].value;
                let (v, d) = (t.rows(), t.cols());
                let mut dt = vec![0.0; v * d];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g.at(r, c);
                    }
                }
                self.add_grad(grads, *table, Tensor::matrix(v, d, dt).expect("embed dt"));
            }
            Op::SliceCols(a, start, len) => {
                let x = &self.nodes[*a].value;
                let (m, n) = (x.rows(), x.cols());
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..*len {
                        dx[r * n + start + c] = g.at(r, c);
                    }
                }
                self.add_grad(grads, *a, Tensor::matrix(m, n, dx).expect("slice dx"));
            }
            Op::ConcatCols(ids) => {
                let m = g.rows();
                let mut offset = 0;
                for &id in ids {
                    let w = self.nodes[id].value.cols();
                    if self.nodes[id].requires_grad {
                        let mut part = Vec::with_capacity(m * w);
                        for r in 0..m {
                            part.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.add_grad(grads, id, Tensor::matrix(m, w, part).expect("concat dx"));
                    }
                    offset += w;
                }
            }
            Op::MaskedFill(a, mask) => {
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&gv, &m)| if m { 0.0 } else { gv })
                    .collect();
                self.add_grad(
                    grads,
                    *a,
                    Tensor::new(g.shape().to_vec(), dx).expect("maskfill dx"),
                );
            }
            Op::Rope(a, cos, sin) => {
                // Inverse rotation applied to the upstream gradient.
                let (m, d) = (g.rows(), g.cols());
                let h = d / 2;
                let mut dx = vec![0.0; m * d];
                for r in 0..m {
                    for j in 0..h {
                        let (c, s) = (cos.at(r, j), sin.at(r, j));
                        let (g0, g1) = (g.at(r, j), g.at(r, j + h));
                        dx[r * d + j] = g0 * c + g1 * s;
                        dx[r * d + j + h] = -g0 * s + g1 * c;
                    }
                }
                self.add_grad(grads, *a, Tensor::matrix(m, d, dx).expect("rope dx"));
            }
            Op::NormalizeRows(a) => {
                let x = &self.nodes[*a].value;
                let y = &self.nodes[i].value;
                let (m, n) = (x.rows(), x.cols());
                let mut dx = Vec::with_capacity(m * n);
                for r in 0..m {
                    let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yrow = y.row(r);
                    let grow = g.row(r);
                    let gdoty: f64 = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                    dx.extend(
                        grow.iter()
                            .zip(yrow)
                            .map(|(&gv, &yv)| (gv - yv * gdoty) / norm),
                    );
                }
                self.add_grad(grads, *a, Tensor::matrix(m, n, dx).expect("norm dx"));
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[*a].value;
                let dx = zip_tensor(g, x, |gv, xv| if xv > *lo && xv < *hi { gv } else { 0.0 });
                self.add_grad(grads, *a, dx);
            }
            Op::SumAll(a) => {
                let x = &self.nodes[*a].value;
                let gv = g.scalar_value();
                self.add_grad(grads, *a, Tensor::full(x.shape(), gv));
            }
        }
    }
}

fn transpose_tensor(t: &Tensor) -> Tensor {
    let (m, n) = (t.rows(), t.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.at(i, j);
        }
    }
    Tensor::matrix(n, m, out).expect("transpose")
}

fn map_tensor(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("map")
}

fn zip_tensor(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("zip")
}
