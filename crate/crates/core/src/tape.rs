//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every forward operation appends a node to the [`Tape`] holding its value
//! and the inputs it was computed from. [`Tape::backward`] walks the nodes
//! in reverse recording order and accumulates `dLoss/dNode` into a gradient
//! buffer for every node that requires a gradient, intermediates included
//! (the attention maps' gradients are read back from here).
//!
//! The tape also counts multiply-accumulates for every matrix product,
//! attributed to the [`MacScope`] active when the product was recorded.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of a layer a matrix product belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    QkvProjection,
    AttentionScores,
    AttentionValues,
    OutProjection,
    Mlp,
    Embedding,
    Classifier,
}

impl Component {
    pub fn is_msa(self) -> bool {
        matches!(
            self,
            Component::QkvProjection
                | Component::AttentionScores
                | Component::AttentionValues
                | Component::OutProjection
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MacScope {
    /// `None` for work outside the transformer blocks.
    pub layer: Option<usize>,
    pub component: Component,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Sum { a: Var },
    Reshape { a: Var },
    Transpose { a: Var, rows: usize, cols: usize },
    SplitHeads { a: Var, batch: usize, tokens: usize, heads: usize, head_dim: usize },
    MergeHeads { a: Var, batch: usize, tokens: usize, heads: usize, head_dim: usize },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: Var },
    GatherColumns { a: Var, indices: Vec<usize>, src_cols: usize },
    PrependToken { x: Var, token: Var, batch: usize, tokens: usize, dim: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    KlDivergence { log_p: Var, target: Vec<f64>, rows: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    scope: Option<MacScope>,
    macs: BTreeMap<MacScope, u64>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was
    /// on a differentiable path.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn set_scope(&mut self, scope: Option<MacScope>) {
        self.scope = scope;
    }

    /// Multiply-accumulate counts recorded so far, per scope.
    pub fn macs(&self) -> &BTreeMap<MacScope, u64> {
        &self.macs
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn count_macs(&mut self, n: u64) {
        if let Some(scope) = self.scope {
            *self.macs.entry(scope).or_insert(0) += n;
        }
    }

    /// Matrix product. Either `a[.., k] x b[k, n]` (leading axes of `a` are
    /// folded into rows) or the batched form `a[b, m, k] x b[b, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let (batch, m, k, n, out_shape) = if sa.len() >= 2 && sb.len() == 2 {
            let k = sa[sa.len() - 1];
            if k != sb[0] {
                return Err(Error::dims("matmul", &sa, &sb));
            }
            let m: usize = sa[..sa.len() - 1].iter().product();
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(sb[1]);
            (1, m, k, sb[1], out)
        } else if sa.len() == 3 && sb.len() == 3 {
            if sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(Error::dims("matmul", &sa, &sb));
            }
            (sa[0], sa[1], sa[2], sb[2], vec![sa[0], sa[1], sb[2]])
        } else {
            return Err(Error::dims("matmul", &sa, &sb));
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for t in 0..batch {
                let b_off = if sb.len() == 3 { t * k * n } else { 0 };
                mm(
                    &av[t * m * k..(t + 1) * m * k],
                    &bv[b_off..b_off + k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.count_macs((batch * m * k * n) as u64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul { a, b, batch, m, k, n },
            rg,
        ))
    }

    /// Elementwise sum. `b` may have the same shape as `a` or a trailing
    /// suffix of it (a bias or position table broadcast over leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dims("add", sa, sb));
        }
        let bv = self.value(b).data();
        let inner = bv.len();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % inner])
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dims("mul", ta.shape(), tb.shape()));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|x| x * factor).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, factor }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() < 2 {
            return Err(Error::dims("transpose", s, &[]));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for (blk_in, blk_out) in src.chunks(rows * cols).zip(out.chunks_mut(rows * cols)) {
            for i in 0..rows {
                for j in 0..cols {
                    blk_out[j * rows + i] = blk_in[i * cols + j];
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose { a, rows, cols }, rg))
    }

    /// `[batch, tokens, heads*head_dim] -> [batch*heads, tokens, head_dim]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::dims("split_heads", &s, &[heads]));
        }
        let (batch, tokens, head_dim) = (s[0], s[1], s[2] / heads);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let i = (b * tokens + t) * heads * head_dim + h * head_dim;
                    let o = ((b * heads + h) * tokens + t) * head_dim;
                    out[o..o + head_dim].copy_from_slice(&src[i..i + head_dim]);
                }
            }
        }
        let rg = self.rg(&[a]);
        let op = Op::SplitHeads { a, batch, tokens, heads, head_dim };
        Ok(self.push(Tensor::new(vec![batch * heads, tokens, head_dim], out)?, op, rg))
    }

    /// Inverse of [`split_heads`](Self::split_heads).
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(Error::dims("merge_heads", &s, &[heads]));
        }
        let (batch, tokens, head_dim) = (s[0] / heads, s[1], s[2]);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let o = (b * tokens + t) * heads * head_dim + h * head_dim;
                    let i = ((b * heads + h) * tokens + t) * head_dim;
                    out[o..o + head_dim].copy_from_slice(&src[i..i + head_dim]);
                }
            }
        }
        let rg = self.rg(&[a]);
        let op = Op::MergeHeads { a, batch, tokens, heads, head_dim };
        Ok(self.push(Tensor::new(vec![batch, tokens, heads * head_dim], out)?, op, rg))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 || t.last_dim() == 0 {
            return Err(Error::contract("softmax over an empty axis"));
        }
        if t.data().iter().any(|x| x.is_nan()) {
            return Err(Error::NumericInput("softmax_rows"));
        }
        let n = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a }, rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|x| x.is_nan()) {
            return Err(Error::NumericInput("log_softmax_rows"));
        }
        let n = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax { a }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        for p in [gamma, beta] {
            if self.value(p).shape() != [n] {
                return Err(Error::dims("layernorm", t.shape(), self.value(p).shape()));
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = t.numel() / n;
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for (r, row) in t.data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::LayerNorm { x, gamma, beta, xhat, rstd };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(t.shape(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu { a }, rg)
    }

    /// Selects positions `indices` along the last axis.
    pub fn gather_columns(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let src_cols = t.last_dim();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src_cols) {
            return Err(Error::contract(format!(
                "gather index {bad} out of range for axis of length {src_cols}"
            )));
        }
        let mut out = Vec::with_capacity(t.numel() / src_cols.max(1) * indices.len());
        for row in t.data().chunks(src_cols) {
            out.extend(indices.iter().map(|&i| row[i]));
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = indices.len();
        let rg = self.rg(&[a]);
        let op = Op::GatherColumns { a, indices: indices.to_vec(), src_cols };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// `x[batch, tokens, dim]`, `token[dim]` -> `[batch, tokens + 1, dim]`
    /// with `token` in position 0 of every sequence.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let st = self.value(token).shape();
        if s.len() != 3 || st.iter().product::<usize>() != s[2] {
            return Err(Error::dims("prepend_token", &s, st));
        }
        let (batch, tokens, dim) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let tv = self.value(token).data();
        let mut out = Vec::with_capacity(batch * (tokens + 1) * dim);
        for b in 0..batch {
            out.extend_from_slice(tv);
            out.extend_from_slice(&xv[b * tokens * dim..(b + 1) * tokens * dim]);
        }
        let rg = self.rg(&[x, token]);
        let op = Op::PrependToken { x, token, batch, tokens, dim };
        Ok(self.push(Tensor::new(vec![batch, tokens + 1, dim], out)?, op, rg))
    }

    /// Mean cross-entropy of `logits[batch, classes]` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::dims("cross_entropy", t.shape(), &[labels.len()]));
        }
        if !t.all_finite() {
            return Err(Error::NumericInput("cross_entropy"));
        }
        let c = t.shape()[1];
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::contract(format!("label {y} out of range for {c} classes")));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let lse = log_sum_exp(row);
            loss += lse - row[y];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        loss /= labels.len() as f64;
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Mean over rows of `KL(target || exp(log_p))`, where `log_p` holds
    /// log-probabilities and `target` is a fixed row-stochastic tensor.
    pub fn kl_divergence(&mut self, log_p: Var, target: &Tensor) -> Result<Var> {
        let t = self.value(log_p);
        if t.shape() != target.shape() || t.rank() == 0 {
            return Err(Error::dims("kl_divergence", t.shape(), target.shape()));
        }
        let rows = t.numel() / t.last_dim();
        let loss = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(&lp, &q)| if q > 0.0 { q * (q.ln() - lp) } else { 0.0 })
            .sum::<f64>()
            / rows as f64;
        let rg = self.rg(&[log_p]);
        let op = Op::KlDivergence { log_p, target: target.data().to_vec(), rows };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients from an earlier call
    /// are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape(), g).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: &Var| nodes[v.0].requires_grad;
        let val = |v: &Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let b_batched = nodes[b.0].value.rank() == 3;
                if needs(a) {
                    let ga = slot(grads, *a, m * k * batch);
                    for t in 0..batch {
                        let bo = if b_batched { t * k * n } else { 0 };
                        mm_bt(
                            &g[t * m * n..(t + 1) * m * n],
                            &val(b)[bo..bo + k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if needs(b) {
                    let len = if b_batched { batch * k * n } else { k * n };
                    let gb = slot(grads, *b, len);
                    for t in 0..batch {
                        let bo = if b_batched { t * k * n } else { 0 };
                        mm_at(
                            &val(a)[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                if needs(a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if needs(b) {
                    let inner = nodes[b.0].value.numel();
                    let gb = slot(grads, *b, inner);
                    for chunk in g.chunks(inner) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::Mul { a, b } => {
                if needs(a) {
                    let other = val(b);
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * other[i];
                    }
                }
                if needs(b) {
                    let other = val(a);
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * other[i];
                    }
                }
            }
            Op::Scale { a, factor } => {
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * factor;
                }
            }
            Op::Sum { a } => {
                let n = nodes[a.0].value.numel();
                slot(grads, *a, n).iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Reshape { a } => add_into(slot(grads, *a, g.len()), g),
            Op::Transpose { a, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let ga = slot(grads, *a, g.len());
                for (blk_g, blk_a) in g.chunks(rows * cols).zip(ga.chunks_mut(rows * cols)) {
                    for i in 0..rows {
                        for j in 0..cols {
                            blk_a[i * cols + j] += blk_g[j * rows + i];
                        }
                    }
                }
            }
            Op::SplitHeads { a, batch, tokens, heads, head_dim } => {
                let (hd, ga) = (*head_dim, slot(grads, *a, g.len()));
                for b in 0..*batch {
                    for t in 0..*tokens {
                        for h in 0..*heads {
                            let i = (b * tokens + t) * heads * hd + h * hd;
                            let o = ((b * heads + h) * tokens + t) * hd;
                            add_into(&mut ga[i..i + hd], &g[o..o + hd]);
                        }
                    }
                }
            }
            Op::MergeHeads { a, batch, tokens, heads, head_dim } => {
                let (hd, ga) = (*head_dim, slot(grads, *a, g.len()));
                for b in 0..*batch {
                    for t in 0..*tokens {
                        for h in 0..*heads {
                            let o = (b * tokens + t) * heads * hd + h * hd;
                            let i = ((b * heads + h) * tokens + t) * hd;
                            add_into(&mut ga[i..i + hd], &g[o..o + hd]);
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let ga = slot(grads, *a, g.len());
                for r in 0..g.len() / n {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        ga[r * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let ga = slot(grads, *a, g.len());
                for r in 0..g.len() / n {
                    let gsum: f64 = g[r * n..(r + 1) * n].iter().sum();
                    for j in 0..n {
                        ga[r * n + j] += g[r * n + j] - y[r * n + j].exp() * gsum;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = node.value.last_dim();
                let rows = g.len() / n;
                if needs(beta) {
                    let gb = slot(grads, *beta, n);
                    for r in 0..rows {
                        add_into(gb, &g[r * n..(r + 1) * n]);
                    }
                }
                if needs(gamma) {
                    let gg = slot(grads, *gamma, n);
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if needs(x) {
                    let gamma_v = val(gamma);
                    let gx = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let xh = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = g[r * n + j] * gamma_v[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(d, h)| d * h).sum::<f64>()
                            / n as f64;
                        for j in 0..n {
                            gx[r * n + j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let x = val(a);
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    let xi = x[i];
                    let t = (GELU_C * (xi + GELU_K * xi * xi * xi)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * xi * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * xi * xi);
                    ga[i] += g[i] * d;
                }
            }
            Op::GatherColumns { a, indices, src_cols } => {
                let m = indices.len();
                let ga = slot(grads, *a, g.len() / m.max(1) * src_cols);
                for (gr, ar) in g.chunks(m).zip(ga.chunks_mut(*src_cols)) {
                    for (j, &i) in indices.iter().enumerate() {
                        ar[i] += gr[j];
                    }
                }
            }
            Op::PrependToken { x, token, batch, tokens, dim } => {
                let (tokens, dim) = (*tokens, *dim);
                let seq = (tokens + 1) * dim;
                if needs(token) {
                    let gt = slot(grads, *token, dim);
                    for b in 0..*batch {
                        add_into(gt, &g[b * seq..b * seq + dim]);
                    }
                }
                if needs(x) {
                    let gx = slot(grads, *x, batch * tokens * dim);
                    for b in 0..*batch {
                        add_into(
                            &mut gx[b * tokens * dim..(b + 1) * tokens * dim],
                            &g[b * seq + dim..(b + 1) * seq],
                        );
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                let gl = slot(grads, *logits, probs.len());
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::KlDivergence { log_p, target, rows } => {
                let scale = g[0] / *rows as f64;
                let gl = slot(grads, *log_p, target.len());
                for i in 0..target.len() {
                    gl[i] -= scale * target[i];
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn mm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// `da[m,k] += dc[m,n] * b[k,n]^T`
fn mm_bt(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += drow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `db[k,n] += a[m,k]^T * dc[m,n]`
fn mm_at(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (dbj, dj) in db[p * n..(p + 1) * n].iter_mut().zip(drow) {
                *dbj += aip * dj;
            }
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(t(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let m = tape.constant(t(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let out = tape.matmul(p, m).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry_and_stabilization() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::new(vec![3], vec![1000.0; 3]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, f64::NAN]).unwrap());
        assert!(matches!(tape.softmax_rows(x), Err(Error::NumericInput(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_square_is_identity() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, -2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(vec![2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::full(vec![2], 1.0));
        let c = tape.constant(Tensor::full(vec![2], 2.0));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn macs_are_attributed_to_the_active_scope() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![3, 4]));
        let b = tape.constant(Tensor::zeros(vec![4, 5]));
        let scope = MacScope { layer: Some(1), component: Component::OutProjection };
        tape.set_scope(Some(scope));
        tape.matmul(a, b).unwrap();
        tape.set_scope(None);
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.macs().get(&scope), Some(&60));
        assert_eq!(tape.macs().len(), 1);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let mut tape = Tape::new();
        let logits = tape.param(&t(&[&[0.3, -1.0, 2.0], &[1.0, 1.0, 0.0]]));
        let lp = tape.log_softmax_rows(logits).unwrap();
        let q = Tensor::new(
            vec![2, 3],
            tape.value(lp).data().iter().map(|x| x.exp()).collect(),
        )
        .unwrap();
        let kl = tape.kl_divergence(lp, &q).unwrap();
        assert!(tape.value(kl).item().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 4]));
        let ce = tape.cross_entropy(logits, &[2]).unwrap();
        assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-15);
    }
}
