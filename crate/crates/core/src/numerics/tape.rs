//! Reverse-mode tape over the primitive set needed by the model.
//!
//! Primitives are recorded in execution order; [`Tape::backward`] walks the
//! record in reverse. Each call overwrites all gradients from scratch, so a
//! tape can be reused for inspection but never accumulates across calls.

use crate::numerics::kernels::{self, LN_EPS};
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// One weighted entry of a matrix, used by [`Tape::pick_weighted`].
#[derive(Debug, Clone, Copy)]
pub struct Pick {
    pub row: usize,
    pub col: usize,
    pub weight: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    BatMatmul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    AddBias { x: usize, b: usize },
    Scale { x: usize, c: f64 },
    Mul { a: usize, b: usize },
    Gelu { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize },
    CausalSoftmax { x: usize },
    SoftmaxRows { x: usize },
    LogSoftmaxRows { x: usize },
    SplitHeads { x: usize, heads: usize },
    MergeHeads { x: usize },
    Gather { table: usize, ids: Vec<usize> },
    ConcatRows { a: usize, b: usize },
    SliceRows { x: usize, start: usize },
    StackRows { x: usize, factor: usize },
    PickWeighted { x: usize, picks: Vec<Pick> },
    StackScalars { xs: Vec<usize> },
    DotConst { x: usize, w: Vec<f64> },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if reachable.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Leaf)
    }

    /// Leaf that participates in gradient computation.
    pub fn param(&mut self, tensor: &Tensor) -> NodeId {
        let mut t = tensor.clone();
        t.requires_grad = true;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { tensor, op });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].tensor.data()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a), m, k, self.data(b), n);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::Matmul { a: a.0, b: b.0 }))
    }

    /// Batched matmul over a leading batch axis: `[B,m,k] x [B,k,n]`, or
    /// `[B,m,k] x [B,n,k]` with `trans_b`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let data = if trans_b {
            kernels::bmm_nt(self.data(a), batch, m, k, self.data(b), n)
        } else {
            kernels::bmm(self.data(a), batch, m, k, self.data(b), n)
        };
        let t = Tensor::new(vec![batch, m, n], data)?;
        Ok(self.push(t, Op::BatMatmul { a: a.0, b: b.0, trans_b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }))
    }

    /// Adds a `[d]` bias to every row of a `[.., d]` tensor.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [d] || d == 0 {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut data = self.data(x).to_vec();
        kernels::add_bias_inplace(&mut data, self.data(b));
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddBias { x: x.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Scale { x: x.0, c })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu { x: x.0 })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] || d == 0 {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let data = kernels::layer_norm_rows(self.data(x), d, self.data(gamma), self.data(beta));
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
        ))
    }

    /// Softmax over the last axis of `[H,S,S]` scores where row `r` may only
    /// attend to columns `0..=r`; masked columns come out exactly zero.
    pub fn causal_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax",
                lhs: s,
                rhs: vec![],
            });
        }
        let (h, n) = (s[0], s[1]);
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for hi in 0..h {
            for r in 0..n {
                let base = hi * n * n + r * n;
                let row = &src[base..base + r + 1];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    data[base + j] = e;
                    sum += e;
                }
                for v in &mut data[base..base + r + 1] {
                    *v /= sum;
                }
            }
        }
        let t = Tensor::new(s, data)?;
        Ok(self.push(t, Op::CausalSoftmax { x: x.0 }))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let cols = *self.shape(x).last().unwrap_or(&0);
        if cols == 0 {
            return Err(Error::contract("softmax_rows needs a non-empty last axis"));
        }
        if self.data(x).iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let mut data = self.data(x).to_vec();
        kernels::softmax_rows_inplace(&mut data, cols);
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::SoftmaxRows { x: x.0 }))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let cols = *self.shape(x).last().unwrap_or(&0);
        if cols == 0 {
            return Err(Error::contract("log_softmax_rows needs a non-empty last axis"));
        }
        if self.data(x).iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("log_softmax_rows"));
        }
        let mut data = self.data(x).to_vec();
        kernels::log_softmax_rows_inplace(&mut data, cols);
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::LogSoftmaxRows { x: x.0 }))
    }

    /// `[S, H*dh] -> [H, S, dh]`
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || heads == 0 || s[1] % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "split_heads",
                lhs: s,
                rhs: vec![heads],
            });
        }
        let (n, d) = (s[0], s[1]);
        let dh = d / heads;
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for h in 0..heads {
            for r in 0..n {
                for j in 0..dh {
                    data[h * n * dh + r * dh + j] = src[r * d + h * dh + j];
                }
            }
        }
        let t = Tensor::new(vec![heads, n, dh], data)?;
        Ok(self.push(t, Op::SplitHeads { x: x.0, heads }))
    }

    /// `[H, S, dh] -> [S, H*dh]`
    pub fn merge_heads(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "merge_heads",
                lhs: s,
                rhs: vec![],
            });
        }
        let (heads, n, dh) = (s[0], s[1], s[2]);
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for h in 0..heads {
            for r in 0..n {
                for j in 0..dh {
                    data[r * heads * dh + h * dh + j] = src[h * n * dh + r * dh + j];
                }
            }
        }
        let t = Tensor::new(vec![n, heads * dh], data)?;
        Ok(self.push(t, Op::MergeHeads { x: x.0 }))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: s,
                rhs: vec![ids.len()],
            });
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather index {bad} out of range for table with {rows} rows"
            )));
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut data = self.data(a).to_vec();
        data.extend_from_slice(self.data(b));
        let t = Tensor::new(vec![sa[0] + sb[0], sa[1]], data)?;
        Ok(self.push(t, Op::ConcatRows { a: a.0, b: b.0 }))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return Err(Error::contract(format!(
                "slice_rows {start}..{} out of range for shape {s:?}",
                start + len
            )));
        }
        let d = s[1];
        let data = self.data(x)[start * d..(start + len) * d].to_vec();
        let t = Tensor::new(vec![len, d], data)?;
        Ok(self.push(t, Op::SliceRows { x: x.0, start }))
    }

    /// `[T, d] -> [floor(T/f), f*d]`: groups of `f` consecutive rows become
    /// one row; trailing rows that do not fill a group are dropped.
    pub fn stack_rows(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || factor == 0 {
            return Err(Error::contract(format!(
                "stack_rows factor {factor} invalid for shape {s:?}"
            )));
        }
        let t_out = s[0] / factor;
        if t_out == 0 {
            return Err(Error::contract(format!(
                "stack_rows: {} rows cannot fill a group of {factor}",
                s[0]
            )));
        }
        let d = s[1];
        let data = self.data(x)[..t_out * factor * d].to_vec();
        let t = Tensor::new(vec![t_out, factor * d], data)?;
        Ok(self.push(t, Op::StackRows { x: x.0, factor }))
    }

    /// Weighted sum of selected entries of a rank-2 node; yields a scalar.
    pub fn pick_weighted(&mut self, x: NodeId, picks: Vec<Pick>) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "pick_weighted",
                lhs: s,
                rhs: vec![],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(p) = picks.iter().find(|p| p.row >= rows || p.col >= cols) {
            return Err(Error::contract(format!(
                "pick ({}, {}) out of range for shape {s:?}",
                p.row, p.col
            )));
        }
        let src = self.data(x);
        let v: f64 = picks.iter().map(|p| p.weight * src[p.row * cols + p.col]).sum();
        let t = Tensor::scalar(v);
        Ok(self.push(t, Op::PickWeighted { x: x.0, picks }))
    }

    /// Stacks scalar nodes into a `[n]` vector.
    pub fn stack_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::contract("stack_scalars needs at least one input"));
        }
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            if !self.nodes[x.0].tensor.is_scalar() {
                return Err(Error::contract("stack_scalars inputs must be scalars"));
            }
            data.push(self.data(x)[0]);
        }
        let t = Tensor::new(vec![xs.len()], data)?;
        Ok(self.push(
            t,
            Op::StackScalars {
                xs: xs.iter().map(|id| id.0).collect(),
            },
        ))
    }

    /// Dot product with a constant vector; yields a scalar.
    pub fn dot_const(&mut self, x: NodeId, w: Vec<f64>) -> Result<NodeId> {
        if self.data(x).len() != w.len() {
            return Err(Error::ShapeMismatch {
                op: "dot_const",
                lhs: self.shape(x).to_vec(),
                rhs: vec![w.len()],
            });
        }
        let v = kernels::dot(self.data(x), &w);
        let t = Tensor::scalar(v);
        Ok(self.push(t, Op::DotConst { x: x.0, w }))
    }

    /// Populates gradients of every node reachable from `loss`, overwriting
    /// any gradients from a previous call.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].tensor.shape()
            )));
        }
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
        self.nodes[loss.0].tensor.grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.nodes[i].tensor.grad.clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}

                Op::Matmul { a, b } => {
                    let sa = self.nodes[a].tensor.shape().to_vec();
                    let sb = self.nodes[b].tensor.shape().to_vec();
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let da = kernels::matmul_nt(&g, m, n, self.nodes[b].tensor.data(), k);
                    let db = kernels::matmul_tn(self.nodes[a].tensor.data(), m, k, &g, n);
                    self.acc(a, &da);
                    self.acc(b, &db);
                }

                Op::BatMatmul { a, b, trans_b } => {
                    let sa = self.nodes[a].tensor.shape().to_vec();
                    let sb = self.nodes[b].tensor.shape().to_vec();
                    let (batch, m, k) = (sa[0], sa[1], sa[2]);
                    if trans_b {
                        // c = a b^T, b: [B,n,k]
                        let n = sb[1];
                        let da = kernels::bmm(&g, batch, m, n, self.nodes[b].tensor.data(), k);
                        let db = kernels::bmm_tn(&g, batch, m, n, self.nodes[a].tensor.data(), k);
                        self.acc(a, &da);
                        self.acc(b, &db);
                    } else {
                        // c = a b, b: [B,k,n]
                        let n = sb[2];
                        let da = kernels::bmm_nt(&g, batch, m, n, self.nodes[b].tensor.data(), k);
                        let db = kernels::bmm_tn(self.nodes[a].tensor.data(), batch, m, k, &g, n);
                        self.acc(a, &da);
                        self.acc(b, &db);
                    }
                }

                Op::Add { a, b } => {
                    self.acc(a, &g);
                    self.acc(b, &g);
                }

                Op::AddBias { x, b } => {
                    let d = self.nodes[b].tensor.numel();
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.acc(x, &g);
                    self.acc(b, &db);
                }

                Op::Scale { x, c } => {
                    let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.acc(x, &dx);
                }

                Op::Mul { a, b } => {
                    let da: Vec<f64> =
                        g.iter().zip(self.nodes[b].tensor.data()).map(|(gv, bv)| gv * bv).collect();
                    let db: Vec<f64> =
                        g.iter().zip(self.nodes[a].tensor.data()).map(|(gv, av)| gv * av).collect();
                    self.acc(a, &da);
                    self.acc(b, &db);
                }

                Op::Gelu { x } => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[x].tensor.data())
                        .map(|(gv, &xv)| gv * kernels::gelu_prime(xv))
                        .collect();
                    self.acc(x, &dx);
                }

                Op::LayerNorm { x, gamma, beta } => {
                    let d = self.nodes[gamma].tensor.numel();
                    let xs = self.nodes[x].tensor.data();
                    let gam = self.nodes[gamma].tensor.data();
                    let mut dx = vec![0.0; xs.len()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for (row, (xr, gr)) in xs.chunks(d).zip(g.chunks(d)).enumerate() {
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let rstd = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * rstd).collect();
                        let mut h_mean = 0.0;
                        let mut hx_mean = 0.0;
                        let mut h = vec![0.0; d];
                        for j in 0..d {
                            dgamma[j] += gr[j] * xhat[j];
                            dbeta[j] += gr[j];
                            h[j] = gr[j] * gam[j];
                            h_mean += h[j];
                            hx_mean += h[j] * xhat[j];
                        }
                        h_mean /= d as f64;
                        hx_mean /= d as f64;
                        let out = &mut dx[row * d..(row + 1) * d];
                        for j in 0..d {
                            out[j] = rstd * (h[j] - h_mean - xhat[j] * hx_mean);
                        }
                    }
                    self.acc(x, &dx);
                    self.acc(gamma, &dgamma);
                    self.acc(beta, &dbeta);
                }

                Op::CausalSoftmax { x } => {
                    let s = self.nodes[i].tensor.shape().to_vec();
                    let (h, n) = (s[0], s[1]);
                    let out = self.nodes[i].tensor.data();
                    let mut dx = vec![0.0; out.len()];
                    for hi in 0..h {
                        for r in 0..n {
                            let base = hi * n * n + r * n;
                            let mut dot = 0.0;
                            for j in 0..=r {
                                dot += g[base + j] * out[base + j];
                            }
                            for j in 0..=r {
                                dx[base + j] = out[base + j] * (g[base + j] - dot);
                            }
                        }
                    }
                    self.acc(x, &dx);
                }

                Op::SoftmaxRows { x } => {
                    let cols = *self.nodes[i].tensor.shape().last().unwrap();
                    let out = self.nodes[i].tensor.data();
                    let mut dx = vec![0.0; out.len()];
                    for ((or, gr), dr) in
                        out.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols))
                    {
                        let dot: f64 = or.iter().zip(gr).map(|(o, gv)| o * gv).sum();
                        for j in 0..cols {
                            dr[j] = or[j] * (gr[j] - dot);
                        }
                    }
                    self.acc(x, &dx);
                }

                Op::LogSoftmaxRows { x } => {
                    let cols = *self.nodes[i].tensor.shape().last().unwrap();
                    let out = self.nodes[i].tensor.data();
                    let mut dx = vec![0.0; out.len()];
                    for ((or, gr), dr) in
                        out.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols))
                    {
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..cols {
                            dr[j] = gr[j] - or[j].exp() * gsum;
                        }
                    }
                    self.acc(x, &dx);
                }

                Op::SplitHeads { x, heads } => {
                    let sx = self.nodes[x].tensor.shape().to_vec();
                    let (n, d) = (sx[0], sx[1]);
                    let dh = d / heads;
                    let mut dx = vec![0.0; n * d];
                    for h in 0..heads {
                        for r in 0..n {
                            for j in 0..dh {
                                dx[r * d + h * dh + j] += g[h * n * dh + r * dh + j];
                            }
                        }
                    }
                    self.acc(x, &dx);
                }

                Op::MergeHeads { x } => {
                    let sx = self.nodes[x].tensor.shape().to_vec();
                    let (heads, n, dh) = (sx[0], sx[1], sx[2]);
                    let mut dx = vec![0.0; heads * n * dh];
                    for h in 0..heads {
                        for r in 0..n {
                            for j in 0..dh {
                                dx[h * n * dh + r * dh + j] += g[r * heads * dh + h * dh + j];
                            }
                        }
                    }
                    self.acc(x, &dx);
                }

                Op::Gather { table, ids } => {
                    let d = self.nodes[table].tensor.shape()[1];
                    let mut dt = vec![0.0; self.nodes[table].tensor.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                    self.acc(table, &dt);
                }

                Op::ConcatRows { a, b } => {
                    let na = self.nodes[a].tensor.numel();
                    self.acc(a, &g[..na]);
                    self.acc(b, &g[na..]);
                }

                Op::SliceRows { x, start } => {
                    let d = self.nodes[x].tensor.shape()[1];
                    let mut dx = vec![0.0; self.nodes[x].tensor.numel()];
                    dx[start * d..start * d + g.len()].copy_from_slice(&g);
                    self.acc(x, &dx);
                }

                Op::StackRows { x, factor: _ } => {
                    let mut dx = vec![0.0; self.nodes[x].tensor.numel()];
                    dx[..g.len()].copy_from_slice(&g);
                    self.acc(x, &dx);
                }

                Op::PickWeighted { x, picks } => {
                    let cols = self.nodes[x].tensor.shape()[1];
                    let mut dx = vec![0.0; self.nodes[x].tensor.numel()];
                    for p in &picks {
                        dx[p.row * cols + p.col] += p.weight * g[0];
                    }
                    self.acc(x, &dx);
                }

                Op::StackScalars { xs } => {
                    for (j, &x) in xs.iter().enumerate() {
                        self.acc(x, &[g[j]]);
                    }
                }

                Op::DotConst { x, w } => {
                    let dx: Vec<f64> = w.iter().map(|wv| wv * g[0]).collect();
                    self.acc(x, &dx);
                }
            }
        }
        Ok(())
    }

    fn acc(&mut self, id: usize, contribution: &[f64]) {
        let numel = self.nodes[id].tensor.numel();
        let grad = self.nodes[id]
            .tensor
            .grad
            .get_or_insert_with(|| vec![0.0; numel]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }
}
