//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order: every input id is smaller than the id of its consumer.
//! `backward` walks the tape once in reverse.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{dot, gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape and masking information for fused multi-head attention.
#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
    /// `batch * k_len` flags; invalid (pad) keys receive zero attention.
    pub key_valid: Vec<bool>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulBt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, bias: Var, cols: usize },
    Scale { a: Var, c: f64 },
    MulConst { a: Var, mask: Vec<f64> },
    Gelu { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { table: Var, idx: Vec<usize>, cols: usize },
    ConcatRows { parts: Vec<Var> },
    Sum { a: Var },
    Softmax { a: Var, cols: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64>, cols: usize },
    MaskedMeanRows { x: Var, batch: usize, len: usize, cols: usize, valid: Vec<bool> },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<f64> },
    Ccl { x: Var, labels: Vec<usize>, rows: usize, cols: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Seeded dropout mask generator. With `rate == 0` it is the identity and
/// consumes no randomness.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    pub fn disabled() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0 && self.rng.is_some()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Drops every node created after the first `len`; their `Var`s become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn mat(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a);
        let (k2, n) = self.mat(b);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a);
        let (n, k2) = self.mat(b);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_bt {:?} x {:?}ᵀ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_bt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.mat(a);
        let src = self.data(a);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        Ok(self.push(Tensor::new(vec![cols, rows], out)?, Op::Transpose { a, rows, cols }, &[a]))
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what} {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds a length-`cols` bias to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.mat(a);
        if self.value(bias).numel() != cols {
            return Err(Error::Dimension(format!(
                "bias {:?} for rows of width {cols}",
                self.value(bias).shape()
            )));
        }
        let b = self.data(bias);
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % cols])
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow { a, bias, cols }, &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale { a, c }, &[a]))
    }

    /// Multiplies by a fixed (non-differentiable) mask.
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::Dimension("mask length".into()));
        }
        let out = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::MulConst { a, mask }, &[a]))
    }

    pub fn dropout(&mut self, a: Var, d: &mut Dropout) -> Result<Var> {
        if !d.is_active() {
            return Ok(a);
        }
        let keep = 1.0 - d.rate;
        let rng = d.rng.as_mut().expect("active dropout has rng");
        let mask = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(a, mask)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Gelu { a }, &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (rows, cols) = self.mat(x);
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Error::Dimension("layer_norm affine width".into()));
        }
        let xs = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gamma, beta, cols, xhat, inv_std },
            &[x, gamma, beta],
        ))
    }

    // ── Indexing / structure ────────────────────────────────────────

    /// `out[i] = table[idx[i]]`; the backward pass scatter-adds, so rows that
    /// are never gathered receive exactly zero gradient.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.mat(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {bad} of table with {rows} rows")));
        }
        if idx.is_empty() {
            return Err(Error::Contract("gather of zero rows".into()));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], out)?,
            Op::GatherRows { table, idx: idx.to_vec(), cols },
            &[table],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.mat(p).1,
            None => return Err(Error::Contract("concat of nothing".into())),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.mat(p);
            if c != cols {
                return Err(Error::Dimension(format!("concat width {c} vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows { parts: parts.to_vec() },
            parts,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { a }, &[a]))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.mat(a);
        let mut out = self.data(a).to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a, cols }, &[a]))
    }

    // ── Losses and fused blocks ─────────────────────────────────────

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let n = targets.len().max(1) as f64;
        self.cross_entropy(logits, targets, &vec![1.0 / n; targets.len()])
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[target_i])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (rows, cols) = self.mat(logits);
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Dimension(format!(
                "cross entropy over {rows} rows with {} targets / {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Index(format!("target {bad} for {cols} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &mut probs[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            loss += weights[r] * (lse - row[targets[r]]);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                cols,
            },
            &[logits],
        ))
    }

    /// Mean over valid rows per sample: `x` is `[batch*len, cols]`, output `[batch, cols]`.
    pub fn masked_mean_rows(&mut self, x: Var, batch: usize, len: usize, valid: &[bool]) -> Result<Var> {
        let (rows, cols) = self.mat(x);
        if rows != batch * len || valid.len() != rows {
            return Err(Error::Dimension("masked mean layout".into()));
        }
        let xs = self.data(x);
        let mut out = vec![0.0; batch * cols];
        for s in 0..batch {
            let count = valid[s * len..(s + 1) * len].iter().filter(|&&v| v).count();
            if count == 0 {
                return Err(Error::Contract(format!("sample {s} has no valid positions")));
            }
            let o = &mut out[s * cols..(s + 1) * cols];
            for t in 0..len {
                if valid[s * len + t] {
                    let r = &xs[(s * len + t) * cols..(s * len + t + 1) * cols];
                    for (oc, v) in o.iter_mut().zip(r) {
                        *oc += v;
                    }
                }
            }
            for oc in o.iter_mut() {
                *oc /= count as f64;
            }
        }
        Ok(self.push(
            Tensor::new(vec![batch, cols], out)?,
            Op::MaskedMeanRows { x, batch, len, cols, valid: valid.to_vec() },
            &[x],
        ))
    }

    /// Scaled dot-product multi-head attention over `[batch*len, d]` row blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (qr, d) = self.mat(q);
        let (kr, dk) = self.mat(k);
        let (vr, dv) = self.mat(v);
        if d != dk || d != dv || kr != vr {
            return Err(Error::Dimension("attention q/k/v widths".into()));
        }
        if qr != spec.batch * spec.q_len || kr != spec.batch * spec.k_len {
            return Err(Error::Dimension("attention row layout".into()));
        }
        if spec.key_valid.len() != kr || spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Dimension("attention heads / key mask".into()));
        }
        if spec.causal && spec.q_len != spec.k_len {
            return Err(Error::Contract("causal attention needs square blocks".into()));
        }
        let (qs, ks, vs) = (self.data(q), self.data(k), self.data(v));
        let h = spec.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (lq, lk) = (spec.q_len, spec.k_len);
        let mut probs = vec![0.0; spec.batch * h * lq * lk];
        let mut out = vec![0.0; qr * d];
        for s in 0..spec.batch {
            for hd in 0..h {
                let off = hd * dh;
                for i in 0..lq {
                    let qrow = &qs[(s * lq + i) * d + off..(s * lq + i) * d + off + dh];
                    let p = &mut probs[((s * h + hd) * lq + i) * lk..((s * h + hd) * lq + i + 1) * lk];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..lk {
                        if spec.key_valid[s * lk + j] && (!spec.causal || j <= i) {
                            let krow = &ks[(s * lk + j) * d + off..(s * lk + j) * d + off + dh];
                            p[j] = dot(qrow, krow) * scale;
                            max = max.max(p[j]);
                        } else {
                            p[j] = f64::NEG_INFINITY;
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        p.iter_mut().for_each(|x| *x = 0.0);
                        continue;
                    }
                    let mut z = 0.0;
                    for x in p.iter_mut() {
                        *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - max).exp() };
                        z += *x;
                    }
                    let orow = &mut out[(s * lq + i) * d + off..(s * lq + i) * d + off + dh];
                    for j in 0..lk {
                        p[j] /= z;
                        if p[j] != 0.0 {
                            let vrow = &vs[(s * lk + j) * d + off..(s * lk + j) * d + off + dh];
                            for (o, vv) in orow.iter_mut().zip(vrow) {
                                *o += p[j] * vv;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![qr, d], out)?,
            Op::Attention { q, k, v, spec, probs },
            &[q, k, v],
        ))
    }

    /// Same-label distance-ratio contrast over the rows of `x`:
    /// `Σ_j Σ_k d(j,k)·[y_j = y_k] / Σ_k d(j,k)`, Euclidean `d`, rows with a
    /// zero denominator contribute 0.
    pub fn ccl_loss(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.mat(x);
        if labels.len() != rows {
            return Err(Error::Dimension(format!("{} labels for {rows} rows", labels.len())));
        }
        let dist = pairwise_distances(self.data(x), rows, cols);
        let loss = ccl_terms(&dist, labels, rows).iter().sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Ccl { x, labels: labels.to_vec(), rows, cols },
            &[x],
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populates `grad` on every trainable leaf reachable from `loss`.
    /// Leaf gradients accumulate across calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| gemm_bt_acc(g, bd, s, *m, *n, *k));
                acc(*b, &mut |s| gemm_at_acc(ad, g, s, *m, *k, *n));
            }
            Op::MatMulBt { a, b, m, k, n } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                // dA[m×k] = G[m×n]·B[n×k]; dB[n×k] = Gᵀ·A
                acc(*a, &mut |s| gemm_acc(g, bd, s, *m, *n, *k));
                acc(*b, &mut |s| gemm_at_acc(g, ad, s, *m, *n, *k));
            }
            Op::Transpose { a, rows, cols } => {
                acc(*a, &mut |s| {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            s[i * cols + j] += g[j * rows + i];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddRow { a, bias, cols } => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*bias, &mut |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % cols] += gv;
                    }
                });
            }
            Op::Scale { a, c } => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::MulConst { a, mask } => {
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Gelu { a } => {
                let ad = self.data(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * gelu_grad(ad[i]);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, cols, xhat, inv_std } => {
                let gd = self.data(*gamma);
                let rows = inv_std.len();
                acc(*x, &mut |s| {
                    let mut dxhat = vec![0.0; *cols];
                    for r in 0..rows {
                        let base = r * cols;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..*cols {
                            dxhat[c] = g[base + c] * gd[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat[base + c];
                        }
                        mean_d /= *cols as f64;
                        mean_dx /= *cols as f64;
                        for c in 0..*cols {
                            s[base + c] += inv_std[r] * (dxhat[c] - mean_d - xhat[base + c] * mean_dx);
                        }
                    }
                });
                acc(*gamma, &mut |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % cols] += gv * xhat[i];
                    }
                });
                acc(*beta, &mut |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % cols] += gv;
                    }
                });
            }
            Op::GatherRows { table, idx, cols } => {
                acc(*table, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g[r * cols..(r + 1) * cols];
                        add_into(&mut s[i * cols..(i + 1) * cols], src);
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    acc(p, &mut |s| add_into(s, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Sum { a } => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Softmax { a, cols } => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for (r, yrow) in y.chunks(*cols).enumerate() {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let inner = dot(yrow, grow);
                        for c in 0..*cols {
                            s[r * cols + c] += yrow[c] * (grow[c] - inner);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, weights, probs, cols } => {
                acc(*logits, &mut |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        let w = weights[r] * g[0];
                        for c in 0..*cols {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            s[r * cols + c] += w * (probs[r * cols + c] - onehot);
                        }
                    }
                });
            }
            Op::MaskedMeanRows { x, batch, len, cols, valid } => {
                acc(*x, &mut |s| {
                    for b in 0..*batch {
                        let count = valid[b * len..(b + 1) * len].iter().filter(|&&v| v).count() as f64;
                        for t in 0..*len {
                            if valid[b * len + t] {
                                let dst = &mut s[(b * len + t) * cols..(b * len + t + 1) * cols];
                                for c in 0..*cols {
                                    dst[c] += g[b * cols + c] / count;
                                }
                            }
                        }
                    }
                });
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (qs, ks, vs) = (self.data(*q), self.data(*k), self.data(*v));
                let d = self.nodes[q.0].value.dims2().1;
                let (dq, dk, dv) = attention_backward(qs, ks, vs, g, probs, spec, d);
                acc(*q, &mut |s| add_into(s, &dq));
                acc(*k, &mut |s| add_into(s, &dk));
                acc(*v, &mut |s| add_into(s, &dv));
            }
            Op::Ccl { x, labels, rows, cols } => {
                let xs = self.data(*x);
                let dist = pairwise_distances(xs, *rows, *cols);
                let terms = ccl_terms(&dist, labels, *rows);
                acc(*x, &mut |s| {
                    for j in 0..*rows {
                        let total: f64 = dist[j * rows..(j + 1) * rows].iter().sum();
                        if total <= 0.0 {
                            continue;
                        }
                        for k in 0..*rows {
                            let djk = dist[j * rows + k];
                            if k == j || djk <= 0.0 {
                                continue;
                            }
                            let same = if labels[j] == labels[k] { 1.0 } else { 0.0 };
                            let coef = g[0] * (same - terms[j]) / total / djk;
                            for c in 0..*cols {
                                let diff = xs[j * cols + c] - xs[k * cols + c];
                                s[j * cols + c] += coef * diff;
                                s[k * cols + c] -= coef * diff;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

fn pairwise_distances(xs: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut d = vec![0.0; rows * rows];
    for j in 0..rows {
        for k in (j + 1)..rows {
            let v = super::tensor::euclidean(&xs[j * cols..(j + 1) * cols], &xs[k * cols..(k + 1) * cols]);
            d[j * rows + k] = v;
            d[k * rows + j] = v;
        }
    }
    d
}

fn ccl_terms(dist: &[f64], labels: &[usize], rows: usize) -> Vec<f64> {
    (0..rows)
        .map(|j| {
            let row = &dist[j * rows..(j + 1) * rows];
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                return 0.0;
            }
            let same: f64 = (0..rows).filter(|&k| labels[k] == labels[j]).map(|k| row[k]).sum();
            same / total
        })
        .collect()
}

fn attention_backward(
    qs: &[f64],
    ks: &[f64],
    vs: &[f64],
    g: &[f64],
    probs: &[f64],
    spec: &AttnSpec,
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let h = spec.heads;
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let (lq, lk) = (spec.q_len, spec.k_len);
    let mut dq = vec![0.0; qs.len()];
    let mut dk = vec![0.0; ks.len()];
    let mut dv = vec![0.0; vs.len()];
    let mut dp = vec![0.0; lk];
    for s in 0..spec.batch {
        for hd in 0..h {
            let off = hd * dh;
            for i in 0..lq {
                let p = &probs[((s * h + hd) * lq + i) * lk..((s * h + hd) * lq + i + 1) * lk];
                let qi = (s * lq + i) * d + off;
                let grow = &g[qi..qi + dh];
                let mut inner = 0.0;
                for j in 0..lk {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let kj = (s * lk + j) * d + off;
                    dp[j] = dot(grow, &vs[kj..kj + dh]);
                    inner += p[j] * dp[j];
                    for c in 0..dh {
                        dv[kj + c] += p[j] * grow[c];
                    }
                }
                for j in 0..lk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - inner) * scale;
                    let kj = (s * lk + j) * d + off;
                    for c in 0..dh {
                        dq[qi + c] += ds * ks[kj + c];
                        dk[kj + c] += ds * qs[qi + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
