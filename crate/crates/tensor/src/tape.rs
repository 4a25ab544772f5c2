use crate::kernels;
use crate::{Real, Result, Tensor, TensorError};
use rand::Rng;
use rand::RngCore;
use std::collections::BTreeMap;

pub type NodeId = usize;

/// Recorded computation graph. Nodes are appended in execution order, so the
/// vector itself is a valid topological order and the backward pass is a
/// single reverse sweep.
pub struct Tape<R: Real> {
    values: Vec<Tensor<R>>,
    ops: Vec<Op<R>>,
    requires_grad: Vec<bool>,
    params: Vec<(String, NodeId)>,
}

enum Op<R: Real> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: R },
    Relu { x: NodeId },
    Gelu { x: NodeId },
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<R>, inv_std: Vec<R> },
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<R>, inv_std: Vec<R> },
    BatchNormEval { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<R>, inv_std: Vec<R> },
    Dropout { x: NodeId, mask: Vec<R> },
    Embedding { table: NodeId, codes: Vec<u32> },
    NumTokens { x: NodeId, w: NodeId, b: NodeId },
    ReplaceToken { tokens: NodeId, repl: NodeId, pos: Vec<usize> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Expand { v: NodeId, rows: usize },
    Reshape { x: NodeId },
    Permute { x: NodeId, perm: Vec<usize> },
    GatherRows { x: NodeId, idx: Vec<usize> },
    TokenAt { x: NodeId, pos: Vec<usize> },
    L2NormalizeRows { x: NodeId, inv_norm: Vec<R> },
    MeanAll { x: NodeId },
    BceWithLogitsMean { logits: NodeId, targets: Vec<R> },
    SoftmaxXentMean { logits: NodeId, probs: Vec<R>, classes: Vec<usize> },
    MseMean { pred: NodeId, targets: Vec<R> },
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<R: Real> {
    grads: Vec<Option<Vec<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, id: NodeId) -> Option<&[R]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

pub(crate) const NORM_EPS: f64 = 1e-5;

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), requires_grad: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<R> {
        &self.values[id]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.values[id].shape()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> NodeId {
        let id = self.values.len();
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        id
    }

    fn rg(&self, id: NodeId) -> bool {
        self.requires_grad[id]
    }

    /// Insert a tensor as a graph input; its `requires_grad` flag decides
    /// whether gradients flow to it.
    pub fn leaf(&mut self, t: Tensor<R>) -> NodeId {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<R>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Insert a named trainable parameter; gradients for it can later be
    /// collected by name via [`Tape::param_grads`]. A frozen parameter takes
    /// part in the forward pass but receives no gradient.
    pub fn param(&mut self, name: &str, t: Tensor<R>, trainable: bool) -> NodeId {
        let id = self.push(t, Op::Leaf, trainable);
        if trainable {
            self.params.push((name.to_string(), id));
        }
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => vec![sa[0], sb[1]],
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => vec![sa[0], sa[1], sb[2]],
            _ => {
                return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
            }
        };
        let numel: usize = out_shape.iter().product();
        let mut out = vec![R::zero(); numel];
        let (da, db) = (&self.values[a], &self.values[b]);
        if sa.len() == 2 {
            kernels::matmul_acc(da.data(), db.data(), &mut out, sa[0], sa[1], sb[1]);
        } else {
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            for i in 0..bs {
                kernels::matmul_acc(
                    &da.data()[i * m * k..(i + 1) * m * k],
                    &db.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b }, rg))
    }

    /// Elementwise add. `b` may either match `a`'s shape exactly or be a
    /// trailing-axes broadcast (e.g. a bias of shape `[d]` added to `[n, d]`).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let suffix_ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..];
        if !suffix_ok {
            return Err(TensorError::ShapeMismatch { op: "add", lhs: sa, rhs: sb });
        }
        let bn = self.values[b].numel().max(1);
        let mut out = self.values[a].data().to_vec();
        let bd = self.values[b].data();
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v + bd[i % bn];
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(sa, out)?, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "mul", lhs: sa, rhs: sb });
        }
        let out: Vec<R> = self.values[a]
            .data()
            .iter()
            .zip(self.values[b].data())
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(sa, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: R) -> Result<NodeId> {
        let out: Vec<R> = self.values[x].data().iter().map(|&v| v * c).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), out)?, Op::Scale { x, c }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<R> =
            self.values[x].data().iter().map(|&v| if v > R::zero() { v } else { R::zero() }).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), out)?, Op::Relu { x }, rg))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<R> = self.values[x].data().iter().map(|&v| kernels::gelu(v)).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), out)?, Op::Gelu { x }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or(TensorError::Invalid {
            op: "softmax",
            msg: "rank-0 input".into(),
        })?;
        let mut out = self.values[x].data().to_vec();
        kernels::softmax_rows(&mut out, n);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x }, rg))
    }

    /// Layer normalization over the last axis with affine parameters.
    /// Zero-variance rows normalize to zero (epsilon-regularized).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::Invalid {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps = R::from_f64(NORM_EPS);
        let rows = self.values[x].numel() / d;
        let xd = self.values[x].data();
        let g = self.values[gamma].data();
        let b = self.values[beta].data();
        let mut xhat = vec![R::zero(); rows * d];
        let mut inv_std = vec![R::zero(); rows];
        let mut out = vec![R::zero(); rows * d];
        let denom = R::from_f64(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mut mean = R::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / denom;
            let mut var = R::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var / denom;
            let inv = R::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            rg,
        ))
    }

    /// Batch normalization over axis 0 of a 2-D input, using batch
    /// statistics. Returns the node id plus the biased batch mean/variance so
    /// the caller can maintain running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, Vec<R>, Vec<R>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                msg: format!("expected 2-D input, got {:?}", shape),
            });
        }
        let (n, f) = (shape[0], shape[1]);
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps = R::from_f64(NORM_EPS);
        let xd = self.values[x].data();
        let g = self.values[gamma].data();
        let b = self.values[beta].data();
        let denom = R::from_f64(n as f64);
        let mut mean = vec![R::zero(); f];
        let mut var = vec![R::zero(); f];
        for r in 0..n {
            for j in 0..f {
                mean[j] = mean[j] + xd[r * f + j];
            }
        }
        for m in mean.iter_mut() {
            *m = *m / denom;
        }
        for r in 0..n {
            for j in 0..f {
                let c = xd[r * f + j] - mean[j];
                var[j] = var[j] + c * c;
            }
        }
        for v in var.iter_mut() {
            *v = *v / denom;
        }
        let inv_std: Vec<R> = var.iter().map(|&v| R::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![R::zero(); n * f];
        let mut out = vec![R::zero(); n * f];
        for r in 0..n {
            for j in 0..f {
                let h = (xd[r * f + j] - mean[j]) * inv_std[j];
                xhat[r * f + j] = h;
                out[r * f + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let id = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std },
            rg,
        );
        Ok((id, mean, var))
    }

    /// Batch normalization using fixed (running) statistics; the statistics
    /// are treated as constants so gradients flow only through `x`, `gamma`
    /// and `beta`.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[R],
        var: &[R],
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != mean.len() || shape[1] != var.len() {
            return Err(TensorError::Invalid {
                op: "batch_norm_eval",
                msg: format!("input {:?} vs {} running stats", shape, mean.len()),
            });
        }
        let (n, f) = (shape[0], shape[1]);
        let eps = R::from_f64(NORM_EPS);
        let inv_std: Vec<R> = var.iter().map(|&v| R::one() / (v + eps).sqrt()).collect();
        let xd = self.values[x].data();
        let g = self.values[gamma].data();
        let b = self.values[beta].data();
        let mut xhat = vec![R::zero(); n * f];
        let mut out = vec![R::zero(); n * f];
        for r in 0..n {
            for j in 0..f {
                let h = (xd[r * f + j] - mean[j]) * inv_std[j];
                xhat[r * f + j] = h;
                out[r * f + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std },
            rg,
        ))
    }

    /// Inverted dropout: drops each entry with probability `p` and scales
    /// survivors by `1/(1-p)`, so the expected output equals the input.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut dyn RngCore) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid { op: "dropout", msg: format!("p={p} outside [0,1)") });
        }
        if p == 0.0 {
            return self.reshape(x, self.shape(x).to_vec());
        }
        let keep_scale = R::from_f64(1.0 / (1.0 - p));
        let mask: Vec<R> = (0..self.values[x].numel())
            .map(|_| if rng.gen::<f64>() < p { R::zero() } else { keep_scale })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with an explicitly provided mask (entries 0 or 1/(1-p)).
    pub fn dropout_with_mask(&mut self, x: NodeId, mask: Vec<R>) -> Result<NodeId> {
        if mask.len() != self.values[x].numel() {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("mask len {} vs input {}", mask.len(), self.values[x].numel()),
            });
        }
        let out: Vec<R> =
            self.values[x].data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), out)?, Op::Dropout { x, mask }, rg))
    }

    /// Embedding lookup: `table[codes[i], :]` stacked into `[len, d]`.
    pub fn embedding(&mut self, table: NodeId, codes: &[u32]) -> Result<NodeId> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("table must be 2-D, got {:?}", ts),
            });
        }
        let (k, d) = (ts[0], ts[1]);
        let mut out = vec![R::zero(); codes.len() * d];
        let td = self.values[table].data();
        for (i, &c) in codes.iter().enumerate() {
            let c = c as usize;
            if c >= k {
                return Err(TensorError::Invalid {
                    op: "embedding",
                    msg: format!("code {c} out of range for table with {k} rows"),
                });
            }
            out[i * d..(i + 1) * d].copy_from_slice(&td[c * d..(c + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![codes.len(), d], out)?,
            Op::Embedding { table, codes: codes.to_vec() },
            rg,
        ))
    }

    /// Per-feature linear tokens: `out[r,i,:] = x[r,i] * w[i,:] + b[i,:]`.
    pub fn num_tokens(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || self.shape(b) != sw.as_slice() {
            return Err(TensorError::ShapeMismatch { op: "num_tokens", lhs: sx, rhs: sw });
        }
        let (rows, n, d) = (sx[0], sw[0], sw[1]);
        let xd = self.values[x].data();
        let wd = self.values[w].data();
        let bd = self.values[b].data();
        let mut out = vec![R::zero(); rows * n * d];
        for r in 0..rows {
            for i in 0..n {
                let xv = xd[r * n + i];
                let dst = &mut out[(r * n + i) * d..(r * n + i + 1) * d];
                let wrow = &wd[i * d..(i + 1) * d];
                let brow = &bd[i * d..(i + 1) * d];
                for j in 0..d {
                    dst[j] = xv * wrow[j] + brow[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![rows, n, d], out)?, Op::NumTokens { x, w, b }, rg))
    }

    /// Replace token `pos[r]` of each row with row `pos[r]` of `repl`
    /// (the learned per-feature mask embeddings).
    pub fn replace_token(&mut self, tokens: NodeId, repl: NodeId, pos: &[usize]) -> Result<NodeId> {
        let st = self.shape(tokens).to_vec();
        let sr = self.shape(repl).to_vec();
        if st.len() != 3 || sr.len() != 2 || st[1] != sr[0] || st[2] != sr[1] || pos.len() != st[0] {
            return Err(TensorError::ShapeMismatch { op: "replace_token", lhs: st, rhs: sr });
        }
        let (rows, n, d) = (st[0], st[1], st[2]);
        let mut out = self.values[tokens].data().to_vec();
        let rd = self.values[repl].data();
        for (r, &p) in pos.iter().enumerate() {
            if p >= n {
                return Err(TensorError::Invalid {
                    op: "replace_token",
                    msg: format!("position {p} out of range for {n} tokens"),
                });
            }
            out[(r * n + p) * d..(r * n + p + 1) * d].copy_from_slice(&rd[p * d..(p + 1) * d]);
        }
        let rg = self.rg(tokens) || self.rg(repl);
        Ok(self.push(
            Tensor::new(vec![rows, n, d], out)?,
            Op::ReplaceToken { tokens, repl, pos: pos.to_vec() },
            rg,
        ))
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat", msg: "no inputs".into() });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut out = vec![R::zero(); outer * total_axis * inner];
        let mut offset = 0usize;
        for &p in parts {
            let pa = self.shape(p)[axis];
            let pd = self.values[p].data();
            for o in 0..outer {
                let src = &pd[o * pa * inner..(o + 1) * pa * inner];
                let dst_start = (o * total_axis + offset) * inner;
                out[dst_start..dst_start + pa * inner].copy_from_slice(src);
            }
            offset += pa;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat { parts: parts.to_vec(), axis },
            rg,
        ))
    }

    /// Broadcast a vector `[d]` to `[rows, d]`.
    pub fn expand(&mut self, v: NodeId, rows: usize) -> Result<NodeId> {
        let sv = self.shape(v).to_vec();
        if sv.len() != 1 {
            return Err(TensorError::Invalid {
                op: "expand",
                msg: format!("expected rank-1 input, got {:?}", sv),
            });
        }
        let d = sv[0];
        let src = self.values[v].data();
        let mut out = vec![R::zero(); rows * d];
        for r in 0..rows {
            out[r * d..(r + 1) * d].copy_from_slice(src);
        }
        let rg = self.rg(v);
        Ok(self.push(Tensor::new(vec![rows, d], out)?, Op::Expand { v, rows }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.values[x].numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = Tensor::new(shape, self.values[x].data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("invalid permutation {:?} for rank {}", perm, shape.len()),
            });
        }
        let out = kernels::permute(self.values[x].data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute { x, perm: perm.to_vec() },
            rg,
        ))
    }

    /// Gather rows along axis 0; indices may repeat.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(TensorError::Invalid { op: "gather_rows", msg: "rank-0 input".into() });
        }
        let inner: usize = shape[1..].iter().product();
        let xd = self.values[x].data();
        let mut out = vec![R::zero(); idx.len() * inner];
        for (i, &r) in idx.iter().enumerate() {
            if r >= shape[0] {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("row {r} out of range for {}", shape[0]),
                });
            }
            out[i * inner..(i + 1) * inner].copy_from_slice(&xd[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        ))
    }

    /// Select one token per row: `[b, t, d]` with positions `[b]` -> `[b, d]`.
    pub fn token_at(&mut self, x: NodeId, pos: &[usize]) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || pos.len() != shape[0] {
            return Err(TensorError::Invalid {
                op: "token_at",
                msg: format!("expected [b,t,d] with b positions, got {:?}", shape),
            });
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let xd = self.values[x].data();
        let mut out = vec![R::zero(); b * d];
        for (r, &p) in pos.iter().enumerate() {
            if p >= t {
                return Err(TensorError::Invalid {
                    op: "token_at",
                    msg: format!("token {p} out of range for {t}"),
                });
            }
            out[r * d..(r + 1) * d].copy_from_slice(&xd[(r * t + p) * d..(r * t + p + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![b, d], out)?,
            Op::TokenAt { x, pos: pos.to_vec() },
            rg,
        ))
    }

    /// L2-normalize each row of a 2-D input.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "l2_normalize",
                msg: format!("expected 2-D input, got {:?}", shape),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        let eps = R::from_f64(1e-12);
        let xd = self.values[x].data();
        let mut inv_norm = vec![R::zero(); n];
        let mut out = vec![R::zero(); n * d];
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let mut sq = R::zero();
            for &v in row {
                sq = sq + v * v;
            }
            let inv = R::one() / (sq + eps).sqrt();
            inv_norm[r] = inv;
            for j in 0..d {
                out[r * d + j] = row[j] * inv;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::L2NormalizeRows { x, inv_norm }, rg))
    }

    /// Mean over all elements -> scalar.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.values[x].numel();
        if n == 0 {
            return Err(TensorError::Invalid { op: "mean_all", msg: "empty input".into() });
        }
        let mut sum = R::zero();
        for &v in self.values[x].data() {
            sum = sum + v;
        }
        let out = Tensor::scalar(sum / R::from_f64(n as f64));
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanAll { x }, rg))
    }

    /// Mean binary cross-entropy with logits against {0,1} targets.
    pub fn bce_with_logits_mean(&mut self, logits: NodeId, targets: &[R]) -> Result<NodeId> {
        let n = self.values[logits].numel();
        if targets.len() != n {
            return Err(TensorError::Invalid {
                op: "bce_with_logits",
                msg: format!("{} logits vs {} targets", n, targets.len()),
            });
        }
        let mut sum = R::zero();
        for (&x, &z) in self.values[logits].data().iter().zip(targets) {
            let pos = if x > R::zero() { x } else { R::zero() };
            sum = sum + pos - x * z + kernels::log1p_exp_neg_abs(x);
        }
        let out = Tensor::scalar(sum / R::from_f64(n as f64));
        let rg = self.rg(logits);
        Ok(self.push(out, Op::BceWithLogitsMean { logits, targets: targets.to_vec() }, rg))
    }

    /// Mean softmax cross-entropy: logits `[k, c]`, integer class targets `[k]`.
    pub fn softmax_xent_mean(&mut self, logits: NodeId, classes: &[usize]) -> Result<NodeId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || classes.len() != shape[0] {
            return Err(TensorError::Invalid {
                op: "softmax_xent",
                msg: format!("expected [k,c] logits with k classes, got {:?}", shape),
            });
        }
        let (k, c) = (shape[0], shape[1]);
        let mut probs = self.values[logits].data().to_vec();
        kernels::softmax_rows(&mut probs, c);
        let mut sum = R::zero();
        for (r, &cls) in classes.iter().enumerate() {
            if cls >= c {
                return Err(TensorError::Invalid {
                    op: "softmax_xent",
                    msg: format!("class {cls} out of range for {c}"),
                });
            }
            let p = probs[r * c + cls].max(R::min_positive_value());
            sum = sum - p.ln();
        }
        let out = Tensor::scalar(sum / R::from_f64(k as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::SoftmaxXentMean { logits, probs, classes: classes.to_vec() },
            rg,
        ))
    }

    /// Mean squared error against constant targets.
    pub fn mse_mean(&mut self, pred: NodeId, targets: &[R]) -> Result<NodeId> {
        let n = self.values[pred].numel();
        if targets.len() != n {
            return Err(TensorError::Invalid {
                op: "mse",
                msg: format!("{} predictions vs {} targets", n, targets.len()),
            });
        }
        let mut sum = R::zero();
        for (&p, &t) in self.values[pred].data().iter().zip(targets) {
            let dlt = p - t;
            sum = sum + dlt * dlt;
        }
        let out = Tensor::scalar(sum / R::from_f64(n as f64));
        let rg = self.rg(pred);
        Ok(self.push(out, Op::MseMean { pred, targets: targets.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar loss. Every grad-requiring node reachable
    /// from the loss receives a gradient; unreachable ones are reported as
    /// zeros by [`Tape::param_grads`].
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<R>> {
        if !self.values[loss].is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.values.len()];
        grads[loss] = Some(vec![R::one()]);
        for id in (0..=loss).rev() {
            if !self.requires_grad[id] {
                continue;
            }
            let gout = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of named parameters collected from a backward pass; params
    /// never reached by the loss get zeros.
    pub fn param_grads(&self, grads: &Gradients<R>) -> BTreeMap<String, Vec<R>> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let g = match grads.get(*id) {
                Some(g) => g.to_vec(),
                None => vec![R::zero(); self.values[*id].numel()],
            };
            out.insert(name.clone(), g);
        }
        out
    }

    fn grad_buf<'g>(&self, grads: &'g mut Vec<Option<Vec<R>>>, id: NodeId) -> &'g mut [R] {
        if grads[id].is_none() {
            grads[id] = Some(vec![R::zero(); self.values[id].numel()]);
        }
        grads[id].as_mut().unwrap()
    }

    fn backprop_node(&self, id: NodeId, gout: &[R], grads: &mut Vec<Option<Vec<R>>>) {
        match &self.ops[id] {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if sa.len() == 2 {
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if self.rg(*a) {
                        let bd = self.values[*b].data().to_vec();
                        let ga = self.grad_buf(grads, *a);
                        kernels::matmul_nt_acc(gout, &bd, ga, m, n, k);
                    }
                    if self.rg(*b) {
                        let ad = self.values[*a].data().to_vec();
                        let gb = self.grad_buf(grads, *b);
                        kernels::matmul_tn_acc(&ad, gout, gb, m, k, n);
                    }
                } else {
                    let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    if self.rg(*a) {
                        let bd = self.values[*b].data().to_vec();
                        let ga = self.grad_buf(grads, *a);
                        for i in 0..bs {
                            kernels::matmul_nt_acc(
                                &gout[i * m * n..(i + 1) * m * n],
                                &bd[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    if self.rg(*b) {
                        let ad = self.values[*a].data().to_vec();
                        let gb = self.grad_buf(grads, *b);
                        for i in 0..bs {
                            kernels::matmul_tn_acc(
                                &ad[i * m * k..(i + 1) * m * k],
                                &gout[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    let ga = self.grad_buf(grads, *a);
                    for (g, &go) in ga.iter_mut().zip(gout) {
                        *g = *g + go;
                    }
                }
                if self.rg(*b) {
                    let bn = self.values[*b].numel();
                    let gb = self.grad_buf(grads, *b);
                    for (i, &go) in gout.iter().enumerate() {
                        gb[i % bn] = gb[i % bn] + go;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let bd = self.values[*b].data().to_vec();
                    let ga = self.grad_buf(grads, *a);
                    for i in 0..gout.len() {
                        ga[i] = ga[i] + gout[i] * bd[i];
                    }
                }
                if self.rg(*b) {
                    let ad = self.values[*a].data().to_vec();
                    let gb = self.grad_buf(grads, *b);
                    for i in 0..gout.len() {
                        gb[i] = gb[i] + gout[i] * ad[i];
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.rg(*x) {
                    let c = *c;
                    let gx = self.grad_buf(grads, *x);
                    for (g, &go) in gx.iter_mut().zip(gout) {
                        *g = *g + go * c;
                    }
                }
            }
            Op::Relu { x } => {
                if self.rg(*x) {
                    let xd = self.values[*x].data().to_vec();
                    let gx = self.grad_buf(grads, *x);
                    for i in 0..gout.len() {
                        if xd[i] > R::zero() {
                            gx[i] = gx[i] + gout[i];
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.rg(*x) {
                    let xd = self.values[*x].data().to_vec();
                    let gx = self.grad_buf(grads, *x);
                    for i in 0..gout.len() {
                        gx[i] = gx[i] + gout[i] * kernels::gelu_grad(xd[i]);
                    }
                }
            }
            Op::Softmax { x } => {
                if self.rg(*x) {
                    let y = self.values[id].data().to_vec();
                    let n = *self.shape(id).last().unwrap();
                    let gx = self.grad_buf(grads, *x);
                    for (row, (yrow, grow)) in
                        y.chunks(n).zip(gout.chunks(n)).enumerate()
                    {
                        let mut dot = R::zero();
                        for (yv, gv) in yrow.iter().zip(grow) {
                            dot = dot + *yv * *gv;
                        }
                        for j in 0..n {
                            gx[row * n + j] = gx[row * n + j] + yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *self.shape(id).last().unwrap();
                let rows = gout.len() / d;
                let gvals = self.values[*gamma].data().to_vec();
                if self.rg(*gamma) {
                    let gg = self.grad_buf(grads, *gamma);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + gout[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let gb = self.grad_buf(grads, *beta);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] = gb[j] + gout[r * d + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let denom = R::from_f64(d as f64);
                    let gx = self.grad_buf(grads, *x);
                    for r in 0..rows {
                        let mut mean_g = R::zero();
                        let mut mean_gx = R::zero();
                        for j in 0..d {
                            let g = gout[r * d + j] * gvals[j];
                            mean_g = mean_g + g;
                            mean_gx = mean_gx + g * xhat[r * d + j];
                        }
                        mean_g = mean_g / denom;
                        mean_gx = mean_gx / denom;
                        for j in 0..d {
                            let g = gout[r * d + j] * gvals[j];
                            gx[r * d + j] = gx[r * d + j]
                                + inv_std[r] * (g - mean_g - xhat[r * d + j] * mean_gx);
                        }
                    }
                }
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let f = self.shape(id)[1];
                let n = gout.len() / f;
                let gvals = self.values[*gamma].data().to_vec();
                if self.rg(*gamma) {
                    let gg = self.grad_buf(grads, *gamma);
                    for r in 0..n {
                        for j in 0..f {
                            gg[j] = gg[j] + gout[r * f + j] * xhat[r * f + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let gb = self.grad_buf(grads, *beta);
                    for r in 0..n {
                        for j in 0..f {
                            gb[j] = gb[j] + gout[r * f + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let denom = R::from_f64(n as f64);
                    let mut mean_g = vec![R::zero(); f];
                    let mut mean_gx = vec![R::zero(); f];
                    for r in 0..n {
                        for j in 0..f {
                            let g = gout[r * f + j] * gvals[j];
                            mean_g[j] = mean_g[j] + g;
                            mean_gx[j] = mean_gx[j] + g * xhat[r * f + j];
                        }
                    }
                    for j in 0..f {
                        mean_g[j] = mean_g[j] / denom;
                        mean_gx[j] = mean_gx[j] / denom;
                    }
                    let gx = self.grad_buf(grads, *x);
                    for r in 0..n {
                        for j in 0..f {
                            let g = gout[r * f + j] * gvals[j];
                            gx[r * f + j] = gx[r * f + j]
                                + inv_std[j] * (g - mean_g[j] - xhat[r * f + j] * mean_gx[j]);
                        }
                    }
                }
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let f = self.shape(id)[1];
                let n = gout.len() / f;
                let gvals = self.values[*gamma].data().to_vec();
                if self.rg(*gamma) {
                    let gg = self.grad_buf(grads, *gamma);
                    for r in 0..n {
                        for j in 0..f {
                            gg[j] = gg[j] + gout[r * f + j] * xhat[r * f + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let gb = self.grad_buf(grads, *beta);
                    for r in 0..n {
                        for j in 0..f {
                            gb[j] = gb[j] + gout[r * f + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let gx = self.grad_buf(grads, *x);
                    for r in 0..n {
                        for j in 0..f {
                            gx[r * f + j] = gx[r * f + j] + gout[r * f + j] * gvals[j] * inv_std[j];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.rg(*x) {
                    let gx = self.grad_buf(grads, *x);
                    for i in 0..gout.len() {
                        gx[i] = gx[i] + gout[i] * mask[i];
                    }
                }
            }
            Op::Embedding { table, codes } => {
                if self.rg(*table) {
                    let d = self.shape(id)[1];
                    let gt = self.grad_buf(grads, *table);
                    for (i, &c) in codes.iter().enumerate() {
                        let c = c as usize;
                        for j in 0..d {
                            gt[c * d + j] = gt[c * d + j] + gout[i * d + j];
                        }
                    }
                }
            }
            Op::NumTokens { x, w, b } => {
                let s = self.shape(id);
                let (rows, n, d) = (s[0], s[1], s[2]);
                if self.rg(*x) {
                    let wd = self.values[*w].data().to_vec();
                    let gx = self.grad_buf(grads, *x);
                    for r in 0..rows {
                        for i in 0..n {
                            let go = &gout[(r * n + i) * d..(r * n + i + 1) * d];
                            let wrow = &wd[i * d..(i + 1) * d];
                            let mut acc = R::zero();
                            for (gv, wv) in go.iter().zip(wrow) {
                                acc = acc + *gv * *wv;
                            }
                            gx[r * n + i] = gx[r * n + i] + acc;
                        }
                    }
                }
                if self.rg(*w) {
                    let xd = self.values[*x].data().to_vec();
                    let gw = self.grad_buf(grads, *w);
                    for r in 0..rows {
                        for i in 0..n {
                            let xv = xd[r * n + i];
                            let go = &gout[(r * n + i) * d..(r * n + i + 1) * d];
                            for j in 0..d {
                                gw[i * d + j] = gw[i * d + j] + xv * go[j];
                            }
                        }
                    }
                }
                if self.rg(*b) {
                    let gb = self.grad_buf(grads, *b);
                    for r in 0..rows {
                        for i in 0..n {
                            let go = &gout[(r * n + i) * d..(r * n + i + 1) * d];
                            for j in 0..d {
                                gb[i * d + j] = gb[i * d + j] + go[j];
                            }
                        }
                    }
                }
            }
            Op::ReplaceToken { tokens, repl, pos } => {
                let s = self.shape(id);
                let (_rows, n, d) = (s[0], s[1], s[2]);
                if self.rg(*tokens) {
                    let gt = self.grad_buf(grads, *tokens);
                    for (r, &p) in pos.iter().enumerate() {
                        for t in 0..n {
                            if t == p {
                                continue;
                            }
                            for j in 0..d {
                                let k = (r * n + t) * d + j;
                                gt[k] = gt[k] + gout[k];
                            }
                        }
                    }
                }
                if self.rg(*repl) {
                    let gr = self.grad_buf(grads, *repl);
                    for (r, &p) in pos.iter().enumerate() {
                        for j in 0..d {
                            gr[p * d + j] = gr[p * d + j] + gout[(r * n + p) * d + j];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.shape(id).to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0usize;
                for &p in parts {
                    let pa = self.shape(p)[*axis];
                    if self.rg(p) {
                        let gp = self.grad_buf(grads, p);
                        for o in 0..outer {
                            let src_start = (o * total_axis + offset) * inner;
                            let dst = &mut gp[o * pa * inner..(o + 1) * pa * inner];
                            for (dv, &sv) in
                                dst.iter_mut().zip(&gout[src_start..src_start + pa * inner])
                            {
                                *dv = *dv + sv;
                            }
                        }
                    }
                    offset += pa;
                }
            }
            Op::Expand { v, rows } => {
                if self.rg(*v) {
                    let d = self.shape(id)[1];
                    let gv = self.grad_buf(grads, *v);
                    for r in 0..*rows {
                        for j in 0..d {
                            gv[j] = gv[j] + gout[r * d + j];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if self.rg(*x) {
                    let gx = self.grad_buf(grads, *x);
                    for (g, &go) in gx.iter_mut().zip(gout) {
                        *g = *g + go;
                    }
                }
            }
            Op::Permute { x, perm } => {
                if self.rg(*x) {
                    let out_shape = self.shape(id).to_vec();
                    let inv = kernels::inverse_permutation(perm);
                    let gback = kernels::permute(gout, &out_shape, &inv);
                    let gx = self.grad_buf(grads, *x);
                    for (g, &go) in gx.iter_mut().zip(&gback) {
                        *g = *g + go;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.rg(*x) {
                    let inner: usize = self.shape(id)[1..].iter().product();
                    let gx = self.grad_buf(grads, *x);
                    for (i, &r) in idx.iter().enumerate() {
                        for j in 0..inner {
                            gx[r * inner + j] = gx[r * inner + j] + gout[i * inner + j];
                        }
                    }
                }
            }
            Op::TokenAt { x, pos } => {
                if self.rg(*x) {
                    let sx = self.shape(*x);
                    let (t, d) = (sx[1], sx[2]);
                    let gx = self.grad_buf(grads, *x);
                    for (r, &p) in pos.iter().enumerate() {
                        for j in 0..d {
                            gx[(r * t + p) * d + j] = gx[(r * t + p) * d + j] + gout[r * d + j];
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, inv_norm } => {
                if self.rg(*x) {
                    let d = self.shape(id)[1];
                    let y = self.values[id].data().to_vec();
                    let gx = self.grad_buf(grads, *x);
                    for r in 0..inv_norm.len() {
                        let yrow = &y[r * d..(r + 1) * d];
                        let grow = &gout[r * d..(r + 1) * d];
                        let mut dot = R::zero();
                        for (yv, gv) in yrow.iter().zip(grow) {
                            dot = dot + *yv * *gv;
                        }
                        for j in 0..d {
                            gx[r * d + j] =
                                gx[r * d + j] + inv_norm[r] * (grow[j] - yrow[j] * dot);
                        }
                    }
                }
            }
            Op::MeanAll { x } => {
                if self.rg(*x) {
                    let n = self.values[*x].numel();
                    let g = gout[0] / R::from_f64(n as f64);
                    let gx = self.grad_buf(grads, *x);
                    for v in gx.iter_mut() {
                        *v = *v + g;
                    }
                }
            }
            Op::BceWithLogitsMean { logits, targets } => {
                if self.rg(*logits) {
                    let n = targets.len();
                    let scale = gout[0] / R::from_f64(n as f64);
                    let xd = self.values[*logits].data().to_vec();
                    let gx = self.grad_buf(grads, *logits);
                    for i in 0..n {
                        gx[i] = gx[i] + scale * (kernels::sigmoid(xd[i]) - targets[i]);
                    }
                }
            }
            Op::SoftmaxXentMean { logits, probs, classes } => {
                if self.rg(*logits) {
                    let c = self.shape(*logits)[1];
                    let k = classes.len();
                    let scale = gout[0] / R::from_f64(k as f64);
                    let gx = self.grad_buf(grads, *logits);
                    for (r, &cls) in classes.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == cls { R::one() } else { R::zero() };
                            gx[r * c + j] = gx[r * c + j] + scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::MseMean { pred, targets } => {
                if self.rg(*pred) {
                    let n = targets.len();
                    let scale = gout[0] * R::from_f64(2.0 / n as f64);
                    let pd = self.values[*pred].data().to_vec();
                    let gx = self.grad_buf(grads, *pred);
                    for i in 0..n {
                        gx[i] = gx[i] + scale * (pd[i] - targets[i]);
                    }
                }
            }
        }
    }
}
