//! Eager reverse-mode differentiation over an append-only op graph.
//!
//! Values are computed on insertion, so callers can read intermediate
//! tensors (e.g. to pick nearest codebook entries) while still recording
//! the op for the backward pass. `backward` walks the nodes in reverse
//! insertion order, which is a valid topological order because inputs
//! always precede their consumers.

use std::sync::Arc;

use thiserror::Error;

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Real, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("loss must be a scalar, got {0}")]
    NonScalarLoss(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type NodeId = usize;

/// Boolean attention visibility: `allowed[r * cols + c]` says whether
/// query row r may attend to source column c. Masked positions receive
/// exactly zero attention weight and contribute nothing to outputs or
/// gradients, which realizes the additive minus-infinity mask with exact
/// renormalization over the unmasked entries.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        AttnMask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    #[inline]
    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

#[derive(Debug, Clone)]
enum Op<E: Real> {
    Leaf,
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, E),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    SoftmaxMasked(NodeId, Option<Arc<AttnMask>>),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Relu(NodeId),
    Gelu(NodeId),
    Tanh(NodeId),
    EmbedLookup {
        table: NodeId,
        indices: Arc<Vec<u32>>,
    },
    GatherRows {
        x: NodeId,
        indices: Arc<Vec<u32>>,
    },
    ColSlice {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SumAll(NodeId),
    StopGrad(NodeId),
    Unfold {
        x: NodeId,
        geom: ConvGeom,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Arc<Vec<u32>>,
        weights: Arc<Vec<E>>,
    },
    SmoothL1 {
        pred: NodeId,
        target: Arc<Tensor<E>>,
        weights: Arc<Tensor<E>>,
        delta: E,
    },
    L1 {
        pred: NodeId,
        target: Arc<Tensor<E>>,
        weights: Arc<Tensor<E>>,
    },
    BceLogits {
        logits: NodeId,
        targets: Arc<Tensor<E>>,
        weights: Arc<Tensor<E>>,
    },
    Mse(NodeId, NodeId),
}

struct Node<E: Real> {
    op: Op<E>,
    value: Tensor<E>,
}

pub struct Graph<E: Real> {
    nodes: Vec<Node<E>>,
}

const LN_EPS: f64 = 1e-5;

impl<E: Real> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op<E>, value: Tensor<E>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Insert a leaf holding a constant or a parameter value.
    pub fn leaf(&mut self, value: Tensor<E>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    fn shape_err(
        op: &'static str,
        a: &Tensor<E>,
        b: &Tensor<E>,
    ) -> NnError {
        NnError::Shape {
            op,
            lhs: a.shape_str(),
            rhs: b.shape_str(),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.rows != tb.rows || ta.cols != tb.cols {
            return Err(Self::shape_err("add", ta, tb));
        }
        let mut v = ta.clone();
        v.add_assign_t(tb);
        Ok(self.push(Op::Add(a, b), v))
    }

    /// Matrix plus a broadcast single-row bias.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if tb.rows != 1 || ta.cols != tb.cols {
            return Err(Self::shape_err("add_row", ta, tb));
        }
        let mut v = ta.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                *v.at_mut(r, c) += tb.data[c];
            }
        }
        Ok(self.push(Op::AddRow(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.rows != tb.rows || ta.cols != tb.cols {
            return Err(Self::shape_err("mul", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect();
        let v = Tensor::from_vec(ta.rows, ta.cols, data);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, factor: E) -> NodeId {
        let v = self.nodes[a].value.map(|e| e * factor);
        self.push(Op::Scale(a, factor), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let nb = self.scale(b, E::from_f64(-1.0));
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.cols != tb.rows {
            return Err(Self::shape_err("matmul", ta, tb));
        }
        let v = matmul_nn(ta, tb);
        Ok(self.push(Op::Matmul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.transpose();
        self.push(Op::Transpose(a), v)
    }

    /// Row-wise softmax. With a mask, each row normalizes over its allowed
    /// columns only; masked outputs are exactly zero. A row with no allowed
    /// column yields all zeros.
    pub fn softmax_masked(
        &mut self,
        a: NodeId,
        mask: Option<Arc<AttnMask>>,
    ) -> Result<NodeId, NnError> {
        let ta = &self.nodes[a].value;
        if let Some(m) = &mask {
            if m.rows != ta.rows || m.cols != ta.cols {
                return Err(NnError::Shape {
                    op: "softmax_masked",
                    lhs: ta.shape_str(),
                    rhs: format!("mask {}x{}", m.rows, m.cols),
                });
            }
        }
        let mut v = Tensor::zeros(ta.rows, ta.cols);
        for r in 0..ta.rows {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..ta.cols {
                if mask.as_ref().is_none_or(|m| m.allowed(r, c)) {
                    mx = mx.max(ta.at(r, c).to_f64());
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mxe = E::from_f64(mx);
            let mut sum = E::ZERO;
            for c in 0..ta.cols {
                if mask.as_ref().is_none_or(|m| m.allowed(r, c)) {
                    let e = (ta.at(r, c) - mxe).exp();
                    *v.at_mut(r, c) = e;
                    sum += e;
                }
            }
            for c in 0..ta.cols {
                if mask.as_ref().is_none_or(|m| m.allowed(r, c)) {
                    *v.at_mut(r, c) = v.at(r, c) / sum;
                }
            }
        }
        Ok(self.push(Op::SoftmaxMasked(a, mask), v))
    }

    /// Per-row layer normalization with affine parameters (single rows).
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, NnError> {
        let (tx, tg, tb) = (
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
        );
        if tg.rows != 1 || tb.rows != 1 || tg.cols != tx.cols || tb.cols != tx.cols {
            return Err(Self::shape_err("layer_norm", tx, tg));
        }
        let v = layer_norm_forward(tx, tg, tb);
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, v))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|e| e.maxv(E::ZERO));
        self.push(Op::Relu(a), v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|e| gelu_scalar(e));
        self.push(Op::Gelu(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|e| e.tanh());
        self.push(Op::Tanh(a), v)
    }

    /// Gather rows of an embedding table. Gradient scatters back into the
    /// table rows.
    pub fn embed_lookup(
        &mut self,
        table: NodeId,
        indices: Arc<Vec<u32>>,
    ) -> Result<NodeId, NnError> {
        let tt = &self.nodes[table].value;
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= tt.rows) {
            return Err(NnError::Invalid {
                op: "embed_lookup",
                msg: format!("index {bad} out of range for table rows {}", tt.rows),
            });
        }
        let mut v = Tensor::zeros(indices.len(), tt.cols);
        for (r, &i) in indices.iter().enumerate() {
            v.data[r * tt.cols..(r + 1) * tt.cols].copy_from_slice(tt.row(i as usize));
        }
        Ok(self.push(Op::EmbedLookup { table, indices }, v))
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: Arc<Vec<u32>>) -> Result<NodeId, NnError> {
        let tx = &self.nodes[x].value;
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= tx.rows) {
            return Err(NnError::Invalid {
                op: "gather_rows",
                msg: format!("row index {bad} out of range for {} rows", tx.rows),
            });
        }
        let mut v = Tensor::zeros(indices.len(), tx.cols);
        for (r, &i) in indices.iter().enumerate() {
            v.data[r * tx.cols..(r + 1) * tx.cols].copy_from_slice(tx.row(i as usize));
        }
        Ok(self.push(Op::GatherRows { x, indices }, v))
    }

    pub fn col_slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let tx = &self.nodes[x].value;
        if start + len > tx.cols {
            return Err(NnError::Invalid {
                op: "col_slice",
                msg: format!("slice {start}..{} exceeds {} cols", start + len, tx.cols),
            });
        }
        let mut v = Tensor::zeros(tx.rows, len);
        for r in 0..tx.rows {
            v.data[r * len..(r + 1) * len]
                .copy_from_slice(&tx.data[r * tx.cols + start..r * tx.cols + start + len]);
        }
        Ok(self.push(Op::ColSlice { x, start, len }, v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].value.rows;
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        let mut v = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let tp = &self.nodes[p].value;
            if tp.rows != rows {
                return Err(Self::shape_err("concat_cols", &self.nodes[parts[0]].value, tp));
            }
            for r in 0..rows {
                v.data[r * total + off..r * total + off + tp.cols]
                    .copy_from_slice(tp.row(r));
            }
            off += tp.cols;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0]].value.cols;
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.rows).sum();
        let mut data = Vec::with_capacity(total * cols);
        for &p in parts {
            let tp = &self.nodes[p].value;
            if tp.cols != cols {
                return Err(Self::shape_err("concat_rows", &self.nodes[parts[0]].value, tp));
            }
            data.extend_from_slice(&tp.data);
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor::from_vec(total, cols, data)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut s = E::ZERO;
        for &e in &self.nodes[a].value.data {
            s += e;
        }
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    /// Identity forward, blocks the gradient.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.clone();
        self.push(Op::StopGrad(a), v)
    }

    /// im2col: input is channels-last (H*W rows, C cols); output row per
    /// output position holding the kernel*kernel*C patch (zero padded).
    pub fn unfold(&mut self, x: NodeId, geom: ConvGeom) -> Result<NodeId, NnError> {
        let tx = &self.nodes[x].value;
        if tx.rows != geom.height * geom.width || tx.cols != geom.channels {
            return Err(NnError::Invalid {
                op: "unfold",
                msg: format!(
                    "input {} does not match geometry {}x{}x{}",
                    tx.shape_str(),
                    geom.height,
                    geom.width,
                    geom.channels
                ),
            });
        }
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let plen = geom.patch_len();
        let c = geom.channels;
        let mut v = Tensor::zeros(oh * ow, plen);
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = oy * ow + ox;
                for ky in 0..geom.kernel {
                    for kx in 0..geom.kernel {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if iy < 0 || ix < 0 || iy >= geom.height as isize || ix >= geom.width as isize
                        {
                            continue;
                        }
                        let irow = iy as usize * geom.width + ix as usize;
                        let dst = orow * plen + (ky * geom.kernel + kx) * c;
                        v.data[dst..dst + c].copy_from_slice(tx.row(irow));
                    }
                }
            }
        }
        Ok(self.push(Op::Unfold { x, geom }, v))
    }

    /// Weighted cross entropy from logits; scalar output
    /// sum_r weights[r] * (logsumexp(row) - row[target]).
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Arc<Vec<u32>>,
        weights: Arc<Vec<E>>,
    ) -> Result<NodeId, NnError> {
        let tl = &self.nodes[logits].value;
        if targets.len() != tl.rows || weights.len() != tl.rows {
            return Err(NnError::Invalid {
                op: "cross_entropy",
                msg: format!(
                    "{} targets / {} weights for {} rows",
                    targets.len(),
                    weights.len(),
                    tl.rows
                ),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= tl.cols) {
            return Err(NnError::Invalid {
                op: "cross_entropy",
                msg: format!("target {bad} out of range for {} classes", tl.cols),
            });
        }
        let mut loss = E::ZERO;
        for r in 0..tl.rows {
            let lse = log_sum_exp(tl.row(r));
            loss += weights[r] * (lse - tl.at(r, targets[r] as usize));
        }
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Elementwise-weighted smooth L1 (Huber with slope 1 outside delta);
    /// scalar output.
    pub fn smooth_l1(
        &mut self,
        pred: NodeId,
        target: Arc<Tensor<E>>,
        weights: Arc<Tensor<E>>,
        delta: E,
    ) -> Result<NodeId, NnError> {
        let tp = &self.nodes[pred].value;
        if tp.rows != target.rows || tp.cols != target.cols {
            return Err(Self::shape_err("smooth_l1", tp, &target));
        }
        if tp.rows != weights.rows || tp.cols != weights.cols {
            return Err(Self::shape_err("smooth_l1", tp, &weights));
        }
        let half = E::from_f64(0.5);
        let mut loss = E::ZERO;
        for i in 0..tp.data.len() {
            let d = tp.data[i] - target.data[i];
            let a = d.abs();
            let term = if a.to_f64() <= delta.to_f64() {
                half * d * d / delta
            } else {
                a - half * delta
            };
            loss += weights.data[i] * term;
        }
        Ok(self.push(
            Op::SmoothL1 {
                pred,
                target,
                weights,
                delta,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Elementwise-weighted absolute error; scalar output.
    pub fn l1(
        &mut self,
        pred: NodeId,
        target: Arc<Tensor<E>>,
        weights: Arc<Tensor<E>>,
    ) -> Result<NodeId, NnError> {
        let tp = &self.nodes[pred].value;
        if tp.rows != target.rows || tp.cols != target.cols {
            return Err(Self::shape_err("l1", tp, &target));
        }
        let mut loss = E::ZERO;
        for i in 0..tp.data.len() {
            loss += weights.data[i] * (tp.data[i] - target.data[i]).abs();
        }
        Ok(self.push(
            Op::L1 {
                pred,
                target,
                weights,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Elementwise-weighted binary cross entropy from logits (numerically
    /// stable softplus form); scalar output.
    pub fn bce_logits(
        &mut self,
        logits: NodeId,
        targets: Arc<Tensor<E>>,
        weights: Arc<Tensor<E>>,
    ) -> Result<NodeId, NnError> {
        let tl = &self.nodes[logits].value;
        if tl.rows != targets.rows || tl.cols != targets.cols {
            return Err(Self::shape_err("bce_logits", tl, &targets));
        }
        let mut loss = E::ZERO;
        for i in 0..tl.data.len() {
            let x = tl.data[i].to_f64();
            let t = targets.data[i].to_f64();
            let term = x.max(0.0) - t * x + (-x.abs()).exp().ln_1p();
            loss += weights.data[i] * E::from_f64(term);
        }
        Ok(self.push(
            Op::BceLogits {
                logits,
                targets,
                weights,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Mean squared error between two nodes; scalar output.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.rows != tb.rows || ta.cols != tb.cols {
            return Err(Self::shape_err("mse", ta, tb));
        }
        let n = E::from_f64(ta.numel() as f64);
        let mut loss = E::ZERO;
        for i in 0..ta.data.len() {
            let d = ta.data[i] - tb.data[i];
            loss += d * d;
        }
        Ok(self.push(Op::Mse(a, b), Tensor::scalar(loss / n)))
    }

    /// Reverse-mode gradients of a scalar loss with respect to every node.
    /// Nodes not on a path to the loss get None.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor<E>>>, NnError> {
        let lv = &self.nodes[loss].value;
        if !lv.is_scalar() {
            return Err(NnError::NonScalarLoss(lv.shape_str()));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(E::ONE));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn accum(grads: &mut [Option<Tensor<E>>], id: NodeId, delta: Tensor<E>) {
        match &mut grads[id] {
            Some(t) => t.add_assign_t(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, id: NodeId, g: &Tensor<E>, grads: &mut Vec<Option<Tensor<E>>>) {
        match &self.nodes[id].op {
            // Leaf terminates the walk; StopGrad blocks propagation.
            Op::Leaf | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                Self::accum(grads, *a, g.clone());
                Self::accum(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                Self::accum(grads, *a, g.clone());
                let mut db = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        db.data[c] += g.at(r, c);
                    }
                }
                Self::accum(grads, *b, db);
            }
            Op::Mul(a, b) => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let da = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect(),
                );
                let db = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&ta.data).map(|(&x, &y)| x * y).collect(),
                );
                Self::accum(grads, *a, da);
                Self::accum(grads, *b, db);
            }
            Op::Scale(a, f) => {
                Self::accum(grads, *a, g.map(|e| e * *f));
            }
            Op::Matmul(a, b) => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                Self::accum(grads, *a, matmul_nt(g, tb));
                Self::accum(grads, *b, matmul_tn(ta, g));
            }
            Op::Transpose(a) => {
                Self::accum(grads, *a, g.transpose());
            }
            Op::SoftmaxMasked(a, mask) => {
                let y = &self.nodes[id].value;
                let mut dx = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let mut dot = E::ZERO;
                    for c in 0..y.cols {
                        if mask.as_ref().is_none_or(|m| m.allowed(r, c)) {
                            dot += g.at(r, c) * y.at(r, c);
                        }
                    }
                    for c in 0..y.cols {
                        if mask.as_ref().is_none_or(|m| m.allowed(r, c)) {
                            *dx.at_mut(r, c) = y.at(r, c) * (g.at(r, c) - dot);
                        }
                    }
                }
                Self::accum(grads, *a, dx);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let tx = &self.nodes[*x].value;
                let tg = &self.nodes[*gamma].value;
                let (dx, dgamma, dbeta) = layer_norm_backward(tx, tg, g);
                Self::accum(grads, *x, dx);
                Self::accum(grads, *gamma, dgamma);
                Self::accum(grads, *beta, dbeta);
            }
            Op::Relu(a) => {
                let ta = &self.nodes[*a].value;
                let dx = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&ta.data)
                        .map(|(&gv, &xv)| if xv > E::ZERO { gv } else { E::ZERO })
                        .collect(),
                );
                Self::accum(grads, *a, dx);
            }
            Op::Gelu(a) => {
                let ta = &self.nodes[*a].value;
                let dx = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&ta.data)
                        .map(|(&gv, &xv)| gv * gelu_grad_scalar(xv))
                        .collect(),
                );
                Self::accum(grads, *a, dx);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let dx = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&y.data)
                        .map(|(&gv, &yv)| gv * (E::ONE - yv * yv))
                        .collect(),
                );
                Self::accum(grads, *a, dx);
            }
            Op::EmbedLookup { table, indices } => {
                let tt = &self.nodes[*table].value;
                let mut dt = Tensor::zeros(tt.rows, tt.cols);
                for (r, &i) in indices.iter().enumerate() {
                    let dst = i as usize * tt.cols;
                    for c in 0..tt.cols {
                        dt.data[dst + c] += g.at(r, c);
                    }
                }
                Self::accum(grads, *table, dt);
            }
            Op::GatherRows { x, indices } => {
                let tx = &self.nodes[*x].value;
                let mut dx = Tensor::zeros(tx.rows, tx.cols);
                for (r, &i) in indices.iter().enumerate() {
                    let dst = i as usize * tx.cols;
                    for c in 0..tx.cols {
                        dx.data[dst + c] += g.at(r, c);
                    }
                }
                Self::accum(grads, *x, dx);
            }
            Op::ColSlice { x, start, len } => {
                let tx = &self.nodes[*x].value;
                let mut dx = Tensor::zeros(tx.rows, tx.cols);
                for r in 0..g.rows {
                    for c in 0..*len {
                        dx.data[r * tx.cols + start + c] += g.at(r, c);
                    }
                }
                Self::accum(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = &self.nodes[p].value;
                    let mut dp = Tensor::zeros(tp.rows, tp.cols);
                    for r in 0..g.rows {
                        for c in 0..tp.cols {
                            dp.data[r * tp.cols + c] = g.at(r, off + c);
                        }
                    }
                    Self::accum(grads, p, dp);
                    off += tp.cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = &self.nodes[p].value;
                    let dp = Tensor::from_vec(
                        tp.rows,
                        tp.cols,
                        g.data[off * g.cols..(off + tp.rows) * g.cols].to_vec(),
                    );
                    Self::accum(grads, p, dp);
                    off += tp.rows;
                }
            }
            Op::SumAll(a) => {
                let ta = &self.nodes[*a].value;
                let gv = g.data[0];
                Self::accum(grads, *a, Tensor::filled(ta.rows, ta.cols, gv));
            }
            Op::Unfold { x, geom } => {
                let tx = &self.nodes[*x].value;
                let mut dx = Tensor::zeros(tx.rows, tx.cols);
                let (oh, ow) = (geom.out_h(), geom.out_w());
                let plen = geom.patch_len();
                let c = geom.channels;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let orow = oy * ow + ox;
                        for ky in 0..geom.kernel {
                            for kx in 0..geom.kernel {
                                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= geom.height as isize
                                    || ix >= geom.width as isize
                                {
                                    continue;
                                }
                                let irow = iy as usize * geom.width + ix as usize;
                                let src = orow * plen + (ky * geom.kernel + kx) * c;
                                for ch in 0..c {
                                    dx.data[irow * c + ch] += g.data[src + ch];
                                }
                            }
                        }
                    }
                }
                Self::accum(grads, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let tl = &self.nodes[*logits].value;
                let gv = g.data[0];
                let mut dl = Tensor::zeros(tl.rows, tl.cols);
                for r in 0..tl.rows {
                    let row = tl.row(r);
                    let lse = log_sum_exp(row);
                    let w = weights[r] * gv;
                    for c in 0..tl.cols {
                        let p = (row[c] - lse).exp();
                        let ind = if c == targets[r] as usize { E::ONE } else { E::ZERO };
                        *dl.at_mut(r, c) = w * (p - ind);
                    }
                }
                Self::accum(grads, *logits, dl);
            }
            Op::SmoothL1 {
                pred,
                target,
                weights,
                delta,
            } => {
                let tp = &self.nodes[*pred].value;
                let gv = g.data[0];
                let mut dp = Tensor::zeros(tp.rows, tp.cols);
                for i in 0..tp.data.len() {
                    let d = tp.data[i] - target.data[i];
                    let slope = if d.abs().to_f64() <= delta.to_f64() {
                        d / *delta
                    } else if d > E::ZERO {
                        E::ONE
                    } else {
                        -E::ONE
                    };
                    dp.data[i] = gv * weights.data[i] * slope;
                }
                Self::accum(grads, *pred, dp);
            }
            Op::L1 {
                pred,
                target,
                weights,
            } => {
                let tp = &self.nodes[*pred].value;
                let gv = g.data[0];
                let mut dp = Tensor::zeros(tp.rows, tp.cols);
                for i in 0..tp.data.len() {
                    let d = tp.data[i] - target.data[i];
                    let s = if d > E::ZERO {
                        E::ONE
                    } else if d < E::ZERO {
                        -E::ONE
                    } else {
                        E::ZERO
                    };
                    dp.data[i] = gv * weights.data[i] * s;
                }
                Self::accum(grads, *pred, dp);
            }
            Op::BceLogits {
                logits,
                targets,
                weights,
            } => {
                let tl = &self.nodes[*logits].value;
                let gv = g.data[0];
                let mut dl = Tensor::zeros(tl.rows, tl.cols);
                for i in 0..tl.data.len() {
                    let x = tl.data[i].to_f64();
                    let sig = 1.0 / (1.0 + (-x).exp());
                    dl.data[i] =
                        gv * weights.data[i] * E::from_f64(sig - targets.data[i].to_f64());
                }
                Self::accum(grads, *logits, dl);
            }
            Op::Mse(a, b) => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let gv = g.data[0];
                let scale = E::from_f64(2.0 / ta.numel() as f64) * gv;
                let da = Tensor::from_vec(
                    ta.rows,
                    ta.cols,
                    ta.data
                        .iter()
                        .zip(&tb.data)
                        .map(|(&x, &y)| scale * (x - y))
                        .collect(),
                );
                let db = da.map(|e| -e);
                Self::accum(grads, *a, da);
                Self::accum(grads, *b, db);
            }
        }
    }
}

fn log_sum_exp<E: Real>(row: &[E]) -> E {
    let mut mx = row[0];
    for &v in row {
        mx = mx.maxv(v);
    }
    let mut s = E::ZERO;
    for &v in row {
        s += (v - mx).exp();
    }
    mx + s.ln()
}

fn layer_norm_forward<E: Real>(x: &Tensor<E>, gamma: &Tensor<E>, beta: &Tensor<E>) -> Tensor<E> {
    let mut out = Tensor::zeros(x.rows, x.cols);
    let n = E::from_f64(x.cols as f64);
    let eps = E::from_f64(LN_EPS);
    for r in 0..x.rows {
        let row = x.row(r);
        let mut mean = E::ZERO;
        for &v in row {
            mean += v;
        }
        mean = mean / n;
        let mut var = E::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var / n;
        let rstd = E::ONE / (var + eps).sqrt();
        for c in 0..x.cols {
            let xhat = (row[c] - mean) * rstd;
            *out.at_mut(r, c) = gamma.data[c] * xhat + beta.data[c];
        }
    }
    out
}

fn layer_norm_backward<E: Real>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    g: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let n = E::from_f64(x.cols as f64);
    let eps = E::from_f64(LN_EPS);
    let mut dx = Tensor::zeros(x.rows, x.cols);
    let mut dgamma = Tensor::zeros(1, x.cols);
    let mut dbeta = Tensor::zeros(1, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let mut mean = E::ZERO;
        for &v in row {
            mean += v;
        }
        mean = mean / n;
        let mut var = E::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var / n;
        let rstd = E::ONE / (var + eps).sqrt();
        // dyhat = g * gamma; dx = rstd*(dyhat - mean(dyhat) - xhat*mean(dyhat*xhat))
        let mut m1 = E::ZERO;
        let mut m2 = E::ZERO;
        for c in 0..x.cols {
            let xhat = (row[c] - mean) * rstd;
            let dyh = g.at(r, c) * gamma.data[c];
            m1 += dyh;
            m2 += dyh * xhat;
            dgamma.data[c] += g.at(r, c) * xhat;
            dbeta.data[c] += g.at(r, c);
        }
        m1 = m1 / n;
        m2 = m2 / n;
        for c in 0..x.cols {
            let xhat = (row[c] - mean) * rstd;
            let dyh = g.at(r, c) * gamma.data[c];
            *dx.at_mut(r, c) = rstd * (dyh - m1 - xhat * m2);
        }
    }
    (dx, dgamma, dbeta)
}

fn gelu_scalar<E: Real>(x: E) -> E {
    let v = x.to_f64();
    let u = (2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v);
    E::from_f64(0.5 * v * (1.0 + u.tanh()))
}

fn gelu_grad_scalar<E: Real>(x: E) -> E {
    let v = x.to_f64();
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * v * v);
    E::from_f64(0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, data.to_vec())
    }

    #[test]
    fn softmax_symmetry_and_single_unmasked() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t64(1, 2, &[0.0, 0.0]));
        let y = g.softmax_masked(x, None).unwrap();
        assert_eq!(g.value(y).data, vec![0.5, 0.5]);

        let mask = Arc::new(AttnMask {
            rows: 1,
            cols: 2,
            allowed: vec![true, false],
        });
        let x2 = g.leaf(t64(1, 2, &[3.0, 100.0]));
        let y2 = g.softmax_masked(x2, Some(mask)).unwrap();
        assert_eq!(g.value(y2).data, vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_over_unmasked() {
        let mask = Arc::new(AttnMask {
            rows: 2,
            cols: 3,
            allowed: vec![true, true, false, true, true, true],
        });
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t64(2, 3, &[0.3, -1.2, 9.0, 0.5, 0.1, -0.4]));
        let y = g.softmax_masked(x, Some(mask)).unwrap();
        let v = g.value(y);
        assert_eq!(v.at(0, 2), 0.0);
        assert!((v.at(0, 0) + v.at(0, 1) - 1.0).abs() < 1e-12);
        assert!((v.at(1, 0) + v.at(1, 1) + v.at(1, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_source_never_affects_output() {
        let mask = Arc::new(AttnMask {
            rows: 1,
            cols: 3,
            allowed: vec![true, false, true],
        });
        let mut g1: Graph<f64> = Graph::new();
        let x1 = g1.leaf(t64(1, 3, &[0.5, 7.0, -0.3]));
        let y1 = g1.softmax_masked(x1, Some(mask.clone())).unwrap();
        let mut g2: Graph<f64> = Graph::new();
        let x2 = g2.leaf(t64(1, 3, &[0.5, -123.0, -0.3]));
        let y2 = g2.softmax_masked(x2, Some(mask)).unwrap();
        assert_eq!(g1.value(y1).data, g2.value(y2).data);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::zeros(2, 3));
        let b = g.leaf(Tensor::zeros(4, 5));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x5"), "{msg}");
    }

    #[test]
    fn backward_sum_of_squares() {
        // loss = sum w_i^2 -> grad = 2w
        let mut g: Graph<f64> = Graph::new();
        let w = g.leaf(t64(1, 3, &[1.0, -2.0, 0.5]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[w].as_ref().unwrap().data, vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_identical() {
        let mut g: Graph<f64> = Graph::new();
        let w = g.leaf(t64(2, 2, &[0.3, -0.7, 1.1, 0.2]));
        let y = g.tanh(w);
        let s = g.sum_all(y);
        let g1 = g.backward(s).unwrap();
        let g2 = g.backward(s).unwrap();
        assert_eq!(g1[w], g2[w]);
    }

    #[test]
    fn stop_grad_blocks() {
        let mut g: Graph<f64> = Graph::new();
        let w = g.leaf(t64(1, 2, &[1.0, 2.0]));
        let sg = g.stop_grad(w);
        let y = g.mul(sg, sg).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads[w].is_none());
    }

    #[test]
    fn layer_norm_statistics() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t64(2, 4, &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]));
        let gamma = g.leaf(Tensor::filled(1, 4, 1.0));
        let beta = g.leaf(Tensor::zeros(1, 4));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        let v = g.value(y);
        for r in 0..2 {
            let mean: f64 = (0..4).map(|c| v.at(r, c)).sum::<f64>() / 4.0;
            let var: f64 = (0..4).map(|c| (v.at(r, c) - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row {r} var {var}");
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g: Graph<f64> = Graph::new();
        let k = 128;
        let logits = g.leaf(Tensor::zeros(1, k));
        let loss = g
            .cross_entropy(logits, Arc::new(vec![3]), Arc::new(vec![1.0]))
            .unwrap();
        assert!((g.value(loss).data[0] - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_branches() {
        let mut g: Graph<f64> = Graph::new();
        let pred = g.leaf(t64(1, 2, &[0.5, 3.0]));
        let target = Arc::new(t64(1, 2, &[0.0, 0.0]));
        let w = Arc::new(Tensor::filled(1, 2, 1.0));
        let loss = g.smooth_l1(pred, target, w, 1.0).unwrap();
        // 0.5*0.5^2 + (3 - 0.5) = 0.125 + 2.5
        assert!((g.value(loss).data[0] - 2.625).abs() < 1e-12);
    }

    #[test]
    fn bce_logit_zero_is_ln2() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(t64(1, 1, &[0.0]));
        let loss = g
            .bce_logits(logits, Arc::new(t64(1, 1, &[1.0])), Arc::new(Tensor::filled(1, 1, 1.0)))
            .unwrap();
        assert!((g.value(loss).data[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn unfold_shapes_and_padding() {
        let geom = ConvGeom {
            height: 4,
            width: 4,
            channels: 2,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!(geom.out_h(), 2);
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::filled(16, 2, 1.0));
        let u = g.unfold(x, geom).unwrap();
        let v = g.value(u);
        assert_eq!((v.rows, v.cols), (4, 18));
        // top-left patch has the first row/col padded with zeros
        assert_eq!(v.at(0, 0), 0.0);
    }

    #[test]
    fn gather_and_embed_roundtrip() {
        let mut g: Graph<f64> = Graph::new();
        let table = g.leaf(t64(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let e = g.embed_lookup(table, Arc::new(vec![2, 0, 2])).unwrap();
        assert_eq!(g.value(e).data, vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.sum_all(e);
        let grads = g.backward(s).unwrap();
        // row 2 used twice, row 1 never
        assert_eq!(grads[table].as_ref().unwrap().data, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
