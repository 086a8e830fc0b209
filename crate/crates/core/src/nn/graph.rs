//! Reverse-mode differentiation over a dynamically recorded operation graph.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably for the duration of a
//! forward pass. Every operation appends a node; nodes are only ever
//! appended, so node order is a valid topological order and `backward`
//! walks it in reverse. Parameters enter the graph once each, as leaves
//! that read their values straight from the store.
//!
//! Nodes that do not depend on any gradient-requiring leaf carry no
//! backward caches and are skipped during `backward`, which is what keeps
//! frozen sub-networks cheap.

use std::collections::HashMap;

use super::kernels::{gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn, softmax_row};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Vec<f32>),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    Unfold {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows(Var),
    WeightedSum {
        layers: Vec<Var>,
        weights: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<f32>,
        count: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Graph<'static> {
    /// A graph with no parameter store, for ops on explicit inputs only.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / cols.max(1), cols)
}

fn accum<'a>(grads: &'a mut [Option<Vec<f32>>], v: Var, len: usize) -> &'a mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records no gradient state, whatever the parameters' flags.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(store)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        let rg = requires_grad && self.grad_enabled;
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let p = store.get(id);
        self.nodes.push(Node {
            shape: p.shape().to_vec(),
            value: Value::Param(id),
            op: Op::Param,
            requires_grad: p.requires_grad && self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f32] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self
                .store
                .expect("graph has no parameter store")
                .value(*id)
                .data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// `[M×K] · [K×N] → [M×N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Adds a length-N vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, cols) = matrix_dims(self.shape(x));
        if self.value(row).len() != cols {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(&[x, row]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum::<f32>();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let xv = self.value(x);
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax"));
        }
        let outer = shape[..axis].iter().product::<usize>();
        let len = shape[axis];
        let inner = shape[axis + 1..].iter().product::<usize>();
        let mut out = xv.to_vec();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = out[base + i * inner];
                }
                softmax_row(&mut buf);
                for (i, b) in buf.iter().enumerate() {
                    out[base + i * inner] = *b;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalises each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let (rows, d) = matrix_dims(self.shape(x));
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rg = self.rg(&[x, gain, bias]);
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = vec![0.0; rows * d];
        let mut xhat = if rg { vec![0.0; rows * d] } else { Vec::new() };
        let mut rstd = if rg { vec![0.0; rows] } else { Vec::new() };
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                out[r * d + c] = h * gv[c] + bv[c];
                if rg {
                    xhat[r * d + c] = h;
                }
            }
            if rg {
                rstd[r] = rs;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scaled dot-product attention over `heads` column groups.
    ///
    /// `q` is `[Tq×D]`, `k` and `v` are `[Tk×D]`; `mask`, when given, is a
    /// row-major `Tq×Tk` table where `true` allows attending. Rows with no
    /// allowed key produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            return Err(Error::dim("attention", sq, sk));
        }
        let (tq, d, tk) = (sq[0], sq[1], sk[0]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim("attention", sq, &[heads]));
        }
        if let Some(m) = mask {
            if m.len() != tq * tk {
                return Err(Error::dim("attention mask", &[tq, tk], &[m.len()]));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let rg = self.rg(&[q, k, v]);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; tq * d];
        let mut probs = if rg {
            vec![0.0; heads * tq * tk]
        } else {
            Vec::new()
        };
        let mut scores = vec![0.0; tq * tk];
        for h in 0..heads {
            let qh = head_slice(qv, tq, d, h, dh);
            let kh = head_slice(kv, tk, d, h, dh);
            let vh = head_slice(vv, tk, d, h, dh);
            scores.iter_mut().for_each(|s| *s = 0.0);
            gemm_nt(&qh, &kh, &mut scores, tq, dh, tk);
            for (i, s) in scores.iter_mut().enumerate() {
                *s = if mask.map_or(true, |m| m[i]) {
                    *s * scale
                } else {
                    f32::NEG_INFINITY
                };
            }
            for row in scores.chunks_mut(tk) {
                softmax_row(row);
            }
            let mut oh = vec![0.0; tq * dh];
            gemm_nn(&scores, &vh, &mut oh, tq, tk, dh);
            scatter_head(&oh, &mut out, tq, d, h, dh);
            if rg {
                probs[h * tq * tk..(h + 1) * tq * tk].copy_from_slice(&scores);
            }
        }
        Ok(self.push(
            vec![tq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Im2col for a same-padded 1-D convolution: `[T×C] → [⌈T/stride⌉ × kernel·C]`.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || kernel == 0 || stride == 0 {
            return Err(Error::dim("unfold", s, &[kernel, stride]));
        }
        let (t, c) = (s[0], s[1]);
        let pad = kernel / 2;
        let tout = t.div_ceil(stride);
        let xv = self.value(x);
        let mut out = vec![0.0; tout * kernel * c];
        for o in 0..tout {
            for j in 0..kernel {
                let src = (o * stride + j) as isize - pad as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let src = src as usize;
                let dst = o * kernel * c + j * c;
                out[dst..dst + c].copy_from_slice(&xv[src * c..(src + 1) * c]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![tout, kernel * c],
            out,
            Op::Unfold { x, kernel, stride },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_rows", &[], &[]));
        };
        let cols = matrix_dims(self.shape(first)).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::dim("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || len == 0 || start + len > s[0] {
            return Err(Error::dim("slice_rows", s, &[start, len]));
        }
        let cols = s[1];
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![len, cols], out, Op::SliceRows { x, start }, rg))
    }

    /// Row lookup `table[ids[i]]`, as used for token embeddings.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::dim("gather_rows", s, &[ids.len()]));
        }
        let (n, cols) = (s[0], s[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= n {
                return Err(Error::Index { index: i, size: n });
            }
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows: `[T×D] → [1×D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("mean_rows", s, &[]));
        }
        let (t, d) = (s[0], s[1]);
        let mut out = vec![0.0; d];
        for row in self.value(x).chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= t as f32);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1, d], out, Op::MeanRows(x), rg))
    }

    /// `Σᵢ weights[i] · layers[i]`, accumulated in layer order.
    pub fn weighted_sum(&mut self, layers: &[Var], weights: Var) -> Result<Var> {
        if layers.is_empty() || self.value(weights).len() != layers.len() {
            return Err(Error::dim(
                "weighted_sum",
                &[layers.len()],
                self.shape(weights),
            ));
        }
        let shape = self.shape(layers[0]).to_vec();
        let mut out = vec![0.0; shape.iter().product()];
        for (i, &l) in layers.iter().enumerate() {
            if self.shape(l) != shape.as_slice() {
                return Err(Error::dim("weighted_sum", &shape, self.shape(l)));
            }
            let w = self.value(weights)[i];
            for (o, v) in out.iter_mut().zip(self.value(l)) {
                *o += w * v;
            }
        }
        let mut inputs = layers.to_vec();
        inputs.push(weights);
        let rg = self.rg(&inputs);
        Ok(self.push(
            shape,
            out,
            Op::WeightedSum {
                layers: layers.to_vec(),
                weights,
            },
            rg,
        ))
    }

    /// Mean token negative log-likelihood over rows whose target is not
    /// `ignore_index`. With every row ignored the loss is zero.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::dim("cross_entropy", s, &[targets.len()]));
        }
        let (n, vocab) = (s[0], s[1]);
        for &t in targets {
            if t != ignore_index && t >= vocab {
                return Err(Error::Index {
                    index: t,
                    size: vocab,
                });
            }
        }
        let rg = self.rg(&[logits]);
        let lv = self.value(logits);
        let mut probs = if rg { vec![0.0; n * vocab] } else { Vec::new() };
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("cross_entropy"));
            }
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t] as f64;
            count += 1;
            if rg {
                for (p, &v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                    *p = ((v as f64 - lse).exp()) as f32;
                }
            }
        }
        let loss = if count == 0 {
            0.0
        } else {
            (total / count as f64) as f32
        };
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Propagates gradients from a scalar `loss` to every reachable
    /// gradient-requiring node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect::<Vec<_>>();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if rg(*a) {
                    let ga = accum(grads, *a, m * k);
                    gemm_nt(g, self.value(*b), ga, m, n, k);
                }
                if rg(*b) {
                    let gb = accum(grads, *b, k * n);
                    gemm_tn(self.value(*a), g, gb, k, m, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        let gv = accum(grads, v, g.len());
                        gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if rg(*x) {
                    let gx = accum(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if rg(*row) {
                    let n = self.value(*row).len();
                    let gr = accum(grads, *row, n);
                    for gr_row in g.chunks(n) {
                        gr.iter_mut().zip(gr_row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let bv = self.value(*b);
                    let ga = accum(grads, *a, g.len());
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if rg(*b) {
                    let av = self.value(*a);
                    let gb = accum(grads, *b, g.len());
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(x, c) => {
                let gx = accum(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(o, v)| *o += c * v);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                let gx = accum(grads, *x, n);
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = accum(grads, *x, g.len());
                for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                    *o += gi * gelu_grad(*xi);
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = match &node.value {
                    Value::Owned(d) => d.as_slice(),
                    Value::Param(_) => unreachable!(),
                };
                let gx = accum(grads, *x, y.len());
                for o in 0..*outer {
                    for j in 0..*inner {
                        let base = o * len * inner + j;
                        let mut dot = 0.0f32;
                        for i in 0..*len {
                            let e = base + i * inner;
                            dot += g[e] * y[e];
                        }
                        for i in 0..*len {
                            let e = base + i * inner;
                            gx[e] += y[e] * (g[e] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let rows = rstd.len();
                if rg(*gain) {
                    let gg = accum(grads, *gain, d);
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if rg(*bias) {
                    let gb = accum(grads, *bias, d);
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                }
                if rg(*x) {
                    let gain_v = self.value(*gain);
                    let gx = accum(grads, *x, rows * d);
                    let mut dxhat = vec![0.0f32; d];
                    for r in 0..rows {
                        let mut mean_d = 0.0f32;
                        let mut mean_dx = 0.0f32;
                        for c in 0..d {
                            dxhat[c] = g[r * d + c] * gain_v[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat[r * d + c];
                        }
                        mean_d /= d as f32;
                        mean_dx /= d as f32;
                        for c in 0..d {
                            gx[r * d + c] +=
                                rstd[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::Unfold { x, kernel, stride } => {
                let s = self.shape(*x);
                let (t, c) = (s[0], s[1]);
                let pad = kernel / 2;
                let tout = t.div_ceil(*stride);
                let gx = accum(grads, *x, t * c);
                for o in 0..tout {
                    for j in 0..*kernel {
                        let src = (o * stride + j) as isize - pad as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let src = src as usize;
                        let off = o * kernel * c + j * c;
                        for (dst, gv) in gx[src * c..(src + 1) * c].iter_mut().zip(&g[off..off + c])
                        {
                            *dst += gv;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if rg(p) {
                        let gp = accum(grads, p, n);
                        gp.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(o, v)| *o += v);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let n = self.value(*x).len();
                let cols = self.shape(*x)[1];
                let gx = accum(grads, *x, n);
                let off = start * cols;
                gx[off..off + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(o, v)| *o += v);
            }
            Op::GatherRows { table, ids } => {
                let n = self.value(*table).len();
                let cols = self.shape(*table)[1];
                let gt = accum(grads, *table, n);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt[id * cols..(id + 1) * cols]
                        .iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                    {
                        *o += v;
                    }
                }
            }
            Op::MeanRows(x) => {
                let s = self.shape(*x);
                let (t, d) = (s[0], s[1]);
                let gx = accum(grads, *x, t * d);
                for row in gx.chunks_mut(d) {
                    for (o, v) in row.iter_mut().zip(g) {
                        *o += v / t as f32;
                    }
                }
            }
            Op::WeightedSum { layers, weights } => {
                let w = self.value(*weights).to_vec();
                for (i, &l) in layers.iter().enumerate() {
                    if rg(l) {
                        let gl = accum(grads, l, g.len());
                        for (o, v) in gl.iter_mut().zip(g) {
                            *o += w[i] * v;
                        }
                    }
                }
                if rg(*weights) {
                    let dots: Vec<f32> = layers
                        .iter()
                        .map(|&l| self.value(l).iter().zip(g).map(|(a, b)| a * b).sum())
                        .collect();
                    let gw = accum(grads, *weights, w.len());
                    gw.iter_mut().zip(dots).for_each(|(o, d)| *o += d);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let vocab = self.shape(*logits)[1];
                let gl = accum(grads, *logits, targets.len() * vocab);
                let s = g[0] / *count as f32;
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore_index {
                        continue;
                    }
                    let row = &mut gl[r * vocab..(r + 1) * vocab];
                    for (c, o) in row.iter_mut().enumerate() {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        *o += s * (probs[r * vocab + c] - onehot);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f32],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (tq, d) = (self.shape(q)[0], self.shape(q)[1]);
        let tk = self.shape(k)[0];
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rq, rk, rv) = (
            self.nodes[q.0].requires_grad,
            self.nodes[k.0].requires_grad,
            self.nodes[v.0].requires_grad,
        );
        let mut gq_all = vec![0.0; tq * d];
        let mut gk_all = vec![0.0; tk * d];
        let mut gv_all = vec![0.0; tk * d];
        for h in 0..heads {
            let p = &probs[h * tq * tk..(h + 1) * tq * tk];
            let gh = head_slice(g, tq, d, h, dh);
            let vh = head_slice(vv, tk, d, h, dh);
            if rv {
                let mut gvh = vec![0.0; tk * dh];
                gemm_tn(p, &gh, &mut gvh, tk, tq, dh);
                scatter_head(&gvh, &mut gv_all, tk, d, h, dh);
            }
            if !(rq || rk) {
                continue;
            }
            let mut dp = vec![0.0; tq * tk];
            gemm_nt(&gh, &vh, &mut dp, tq, dh, tk);
            for (dp_row, p_row) in dp.chunks_mut(tk).zip(p.chunks(tk)) {
                let dot: f32 = dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                for (x, pv) in dp_row.iter_mut().zip(p_row) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            if rq {
                let kh = head_slice(kv, tk, d, h, dh);
                let mut gqh = vec![0.0; tq * dh];
                gemm_nn(&dp, &kh, &mut gqh, tq, tk, dh);
                scatter_head(&gqh, &mut gq_all, tq, d, h, dh);
            }
            if rk {
                let qh = head_slice(qv, tq, d, h, dh);
                let mut gkh = vec![0.0; tk * dh];
                gemm_tn(&dp, &qh, &mut gkh, tk, tq, dh);
                scatter_head(&gkh, &mut gk_all, tk, d, h, dh);
            }
        }
        for (var, on, gbuf) in [(q, rq, gq_all), (k, rk, gk_all), (v, rv, gv_all)] {
            if on {
                let dst = accum(grads, var, gbuf.len());
                dst.iter_mut().zip(&gbuf).for_each(|(o, x)| *o += x);
            }
        }
    }
}

fn head_slice(x: &[f32], rows: usize, d: usize, h: usize, dh: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&x[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn scatter_head(src: &[f32], dst: &mut [f32], rows: usize, d: usize, h: usize, dh: usize) {
    for r in 0..rows {
        dst[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient buffers of the store parameters that took part in the graph,
    /// sorted by parameter id.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Vec<f32>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].take().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
