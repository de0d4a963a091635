//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly (the forward value is
//! computed on insertion) and [`Graph::backward`] walks the tape in reverse
//! accumulating gradients. Nodes that do not depend on a trainable leaf are
//! skipped during the backward pass.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Elu(Var),
    LogClamp(Var, T),
    Softmax(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Gather { table: Var, ids: Vec<usize>, padding: Option<usize> },
    Conv2dSame { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    SumAll(Var),
    SumSquares(Var),
    LstmCell { pre: Var, c_prev: Var, h_prev: Var, mask: Option<Vec<bool>>, cache: Vec<T> },
    GruCell { xp: Var, hp: Var, h_prev: Var, mask: Option<Vec<bool>>, cache: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` into the permuted layout `out[axes-order]`.
fn permute_data<T: Scalar>(src: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..src.len() {
        let offset: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[offset]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// `[..., k] x [k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Shape(format!("bmm {sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::Shape(format!("bmm inner dims {sa:?} x {sb:?}")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            let a_s = &da[bi * m * k..(bi + 1) * m * k];
            let b_s = &db[bi * k * n..(bi + 1) * k * n];
            let c_s = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                gemm_nt(a_s, b_s, c_s, m, k, n);
            } else {
                gemm_nn(a_s, b_s, c_s, m, k, n);
            }
        }
        let value = Tensor::from_vec(&[batch, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::Shape(format!(
                "bias {:?} for input {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        if c.shape() != self.shape(x) {
            return Err(Error::Shape(format!(
                "mul_const {:?} vs {:?}",
                self.shape(x),
                c.shape()
            )));
        }
        let value = self.value(x).zip_map(&c, |a, b| a * b);
        Ok(self.push(value, Op::MulConst(x, c), &[x]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v.exp() - T::one() });
        self.push(value, Op::Elu(x), &[x])
    }

    /// `ln(max(x, eps))`
    pub fn log_clamp(&mut self, x: Var, eps: T) -> Var {
        let value = self.value(x).map(|v| v.max(eps).ln());
        self.push(value, Op::LogClamp(x, eps), &[x])
    }

    /// Softmax over the last axis. `mask` (one flag per element) removes
    /// entries from the normalization; fully masked rows become zero.
    pub fn softmax(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        if let Some(m) = &mask {
            if m.len() != self.value(x).len() {
                return Err(Error::Shape("softmax mask length".into()));
            }
        }
        let mut value = self.value(x).clone();
        let d = value.last_dim();
        for (r, row) in value.data_mut().chunks_mut(d).enumerate() {
            softmax_in_place(row, mask.as_ref().map(|m| &m[r * d..(r + 1) * d]));
        }
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape(format!("concat {first:?} with {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * d..(o + 1) * d]);
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice axis {axis} [{start}, {}) of {shape:?}",
                start + len
            )));
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        let src = self.value(x).data();
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Removes `axis` by taking index `idx` along it.
    pub fn select(&mut self, x: Var, axis: usize, idx: usize) -> Result<Var> {
        let s = self.slice(x, axis, idx, 1)?;
        let mut shape = self.shape(s).to_vec();
        shape.remove(axis);
        self.reshape(s, &shape)
    }

    /// Stacks equally shaped tensors along a new `axis`.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut shape = self.shape(p).to_vec();
            shape.insert(axis, 1);
            expanded.push(self.reshape(p, &shape)?);
        }
        self.concat(&expanded, axis)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!("permute {axes:?} of {shape:?}")));
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, axes);
        let value = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    /// Embedding lookup: rows of a `[V, D]` table for each id, laid out as
    /// `prefix ++ [D]`. Rows at `padding` never receive gradient.
    pub fn gather(
        &mut self,
        table: Var,
        ids: &[usize],
        prefix: &[usize],
        padding: Option<usize>,
    ) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape(format!(
                "gather {} ids (prefix {prefix:?}) from {ts:?}",
                ids.len()
            )));
        }
        let (v, d) = (ts[0], ts[1]);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Shape(format!("index {id} out of vocabulary {v}")));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                padding,
            },
            &[table],
        ))
    }

    /// 2-D convolution with "same" zero padding. `x: [B, Cin, H, W]`,
    /// `w: [Cout, Cin, KH, KW]`, `b: [Cout]`. For even kernels the extra
    /// padding row/column goes after the data.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(Error::Shape(format!(
                "conv2d input {xs:?}, kernel {ws:?}, bias {:?}",
                self.shape(b)
            )));
        }
        let (bn, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); bn * cout * h * wd];
        for n in 0..bn {
            for co in 0..cout {
                let o_base = (n * cout + co) * h * wd;
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = bv[co];
                        for ci in 0..cin {
                            let x_base = (n * cin + ci) * h * wd;
                            let w_base = (co * cin + ci) * kh * kw;
                            for u in 0..kh {
                                let ii = i + u;
                                if ii < pt || ii - pt >= h {
                                    continue;
                                }
                                let ii = ii - pt;
                                for v in 0..kw {
                                    let jj = j + v;
                                    if jj < pl || jj - pl >= wd {
                                        continue;
                                    }
                                    acc += wv[w_base + u * kw + v] * xv[x_base + ii * wd + jj - pl];
                                }
                            }
                        }
                        out[o_base + i * wd + j] = acc;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[bn, cout, h, wd], out)?;
        Ok(self.push(value, Op::Conv2dSame { x, w, b }, &[x, w, b]))
    }

    /// Batch normalization over the rows of `x` (viewed as `[N, D]`) using
    /// the statistics of this batch. Returns the output and the batch mean
    /// and biased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let d = self.value(x).last_dim();
        let rows = self.value(x).len() / d;
        let xv = self.value(x).data();
        let n = T::from_usize(rows).expect("row count");
        let mut mean = vec![T::zero(); d];
        for row in xv.chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); d];
        for row in xv.chunks(d) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        let out = self.batch_norm_with(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        self.batch_norm_with(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
        train: bool,
    ) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] || mean.len() != d || var.len() != d {
            return Err(Error::Shape(format!("batch norm over width {d}")));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xv = self.value(x).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum_squares());
        self.push(value, Op::SumSquares(x), &[x])
    }

    /// One LSTM step. `pre: [B, 4H]` holds the gate pre-activations in
    /// (input, forget, cell, output) order. The result is `[B, 2H]`, new
    /// hidden state followed by new cell state. Rows whose `mask` flag is
    /// false carry `h_prev`/`c_prev` through unchanged.
    pub fn lstm_cell(
        &mut self,
        pre: Var,
        h_prev: Var,
        c_prev: Var,
        mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let ps = self.shape(pre).to_vec();
        let hs = self.shape(h_prev).to_vec();
        if ps.len() != 2 || hs.len() != 2 || ps[1] != 4 * hs[1] || ps[0] != hs[0] || self.shape(c_prev) != hs {
            return Err(Error::Shape(format!("lstm cell pre {ps:?}, state {hs:?}")));
        }
        let (batch, hid) = (hs[0], hs[1]);
        if mask.as_ref().is_some_and(|m| m.len() != batch) {
            return Err(Error::Shape("lstm cell mask length".into()));
        }
        let (pv, hv, cv) = (
            self.value(pre).data(),
            self.value(h_prev).data(),
            self.value(c_prev).data(),
        );
        let mut out = vec![T::zero(); batch * 2 * hid];
        let mut cache = vec![T::zero(); batch * 5 * hid];
        for r in 0..batch {
            let p = &pv[r * 4 * hid..(r + 1) * 4 * hid];
            let o_row = &mut out[r * 2 * hid..(r + 1) * 2 * hid];
            if mask.as_ref().is_some_and(|m| !m[r]) {
                o_row[..hid].copy_from_slice(&hv[r * hid..(r + 1) * hid]);
                o_row[hid..].copy_from_slice(&cv[r * hid..(r + 1) * hid]);
                continue;
            }
            let cache_row = &mut cache[r * 5 * hid..(r + 1) * 5 * hid];
            for k in 0..hid {
                let i = sigmoid(p[k]);
                let f = sigmoid(p[hid + k]);
                let g = p[2 * hid + k].tanh();
                let o = sigmoid(p[3 * hid + k]);
                let c = f * cv[r * hid + k] + i * g;
                let tc = c.tanh();
                o_row[k] = o * tc;
                o_row[hid + k] = c;
                cache_row[k] = i;
                cache_row[hid + k] = f;
                cache_row[2 * hid + k] = g;
                cache_row[3 * hid + k] = o;
                cache_row[4 * hid + k] = tc;
            }
        }
        let value = Tensor::from_vec(&[batch, 2 * hid], out)?;
        Ok(self.push(
            value,
            Op::LstmCell {
                pre,
                c_prev,
                h_prev,
                mask,
                cache,
            },
            &[pre, h_prev, c_prev],
        ))
    }

    /// One GRU step with gate pre-activations in (reset, update, candidate)
    /// order: `xp = x W_x + b_x` and `hp = h W_h + b_h`, both `[B, 3H]`.
    /// The candidate uses `tanh(x_n + r * h_n)`. Masked rows keep `h_prev`.
    pub fn gru_cell(
        &mut self,
        xp: Var,
        hp: Var,
        h_prev: Var,
        mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let xs = self.shape(xp).to_vec();
        let hs = self.shape(h_prev).to_vec();
        if xs.len() != 2 || hs.len() != 2 || xs[1] != 3 * hs[1] || xs[0] != hs[0] || self.shape(hp) != xs {
            return Err(Error::Shape(format!("gru cell pre {xs:?}, state {hs:?}")));
        }
        let (batch, hid) = (hs[0], hs[1]);
        if mask.as_ref().is_some_and(|m| m.len() != batch) {
            return Err(Error::Shape("gru cell mask length".into()));
        }
        let (xv, hpv, hv) = (
            self.value(xp).data(),
            self.value(hp).data(),
            self.value(h_prev).data(),
        );
        let mut out = vec![T::zero(); batch * hid];
        let mut cache = vec![T::zero(); batch * 3 * hid];
        for r in 0..batch {
            if mask.as_ref().is_some_and(|m| !m[r]) {
                out[r * hid..(r + 1) * hid].copy_from_slice(&hv[r * hid..(r + 1) * hid]);
                continue;
            }
            let x = &xv[r * 3 * hid..(r + 1) * 3 * hid];
            let h = &hpv[r * 3 * hid..(r + 1) * 3 * hid];
            for k in 0..hid {
                let rg = sigmoid(x[k] + h[k]);
                let z = sigmoid(x[hid + k] + h[hid + k]);
                let n = (x[2 * hid + k] + rg * h[2 * hid + k]).tanh();
                out[r * hid + k] = (T::one() - z) * n + z * hv[r * hid + k];
                cache[r * 3 * hid + k] = rg;
                cache[r * 3 * hid + hid + k] = z;
                cache[r * 3 * hid + 2 * hid + k] = n;
            }
        }
        let value = Tensor::from_vec(&[batch, hid], out)?;
        Ok(self.push(
            value,
            Op::GruCell {
                xp,
                hp,
                h_prev,
                mask,
                cache,
            },
            &[xp, hp, h_prev],
        ))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            } else {
                self.propagate(id, &g, &mut grads);
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.len() / k.max(1);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_vec(av.shape(), da).expect("shape"));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(av.data(), g.data(), &mut db, k, m, n);
                    self.accumulate(grads, *b, Tensor::from_vec(bv.shape(), db).expect("shape"));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for bi in 0..batch {
                    let a_s = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let b_s = &bv.data()[bi * k * n..(bi + 1) * k * n];
                    let g_s = &g.data()[bi * m * n..(bi + 1) * m * n];
                    let da_s = &mut da[bi * m * k..(bi + 1) * m * k];
                    let db_s = &mut db[bi * k * n..(bi + 1) * k * n];
                    if *trans_b {
                        // c = a b^T, b: [n, k]
                        gemm_nn(g_s, b_s, da_s, m, n, k);
                        gemm_tn(g_s, a_s, db_s, n, m, k);
                    } else {
                        gemm_nt(g_s, b_s, da_s, m, n, k);
                        gemm_tn(a_s, g_s, db_s, k, m, n);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(av.shape(), da).expect("shape"));
                self.accumulate(grads, *b, Tensor::from_vec(bv.shape(), db).expect("shape"));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let d = g.last_dim();
                    let mut db = vec![T::zero(); d];
                    for row in g.rows() {
                        for (s, &v) in db.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_vec(&[d], db).expect("shape"));
                }
            }
            Op::MulConst(x, c) => self.accumulate(grads, *x, g.zip_map(c, |a, b| a * b)),
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape).expect("shape"));
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, g.zip_map(out, |d, y| d * y * (T::one() - y)));
            }
            Op::Tanh(x) => {
                self.accumulate(grads, *x, g.zip_map(out, |d, y| d * (T::one() - y * y)));
            }
            Op::Relu(x) => {
                self.accumulate(
                    grads,
                    *x,
                    g.zip_map(self.value(*x), |d, v| if v > T::zero() { d } else { T::zero() }),
                );
            }
            Op::Elu(x) => {
                self.accumulate(
                    grads,
                    *x,
                    g.zip_map(out, |d, y| if y > T::zero() { d } else { d * (y + T::one()) }),
                );
            }
            Op::LogClamp(x, eps) => {
                let eps = *eps;
                self.accumulate(
                    grads,
                    *x,
                    g.zip_map(self.value(*x), |d, v| if v > eps { d / v } else { T::zero() }),
                );
            }
            Op::Softmax(x) => {
                let d = out.last_dim();
                let mut dx = vec![T::zero(); out.len()];
                for ((y, gy), dxr) in out.rows().zip(g.rows()).zip(dx.chunks_mut(d)) {
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dxr[j] = y[j] * (gy[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(out.shape(), dx).expect("shape"));
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                let total = out.shape()[*axis] * inner;
                for &p in parts {
                    let d = self.shape(p)[*axis] * inner;
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(outer * d);
                        for o in 0..outer {
                            let base = o * total + offset;
                            dp.extend_from_slice(&g.data()[base..base + d]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(self.shape(p), dp).expect("shape"));
                    }
                    offset += d;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, dim, inner) = axis_split(shape, *axis);
                let len = out.shape()[*axis];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(shape, dx).expect("shape"));
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (shape, data) = permute_data(g.data(), g.shape(), &inverse);
                self.accumulate(grads, *x, Tensor::from_vec(&shape, data).expect("shape"));
            }
            Op::Gather { table, ids, padding } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut dt = vec![T::zero(); tv.len()];
                for (row, &id) in g.data().chunks(d).zip(ids) {
                    if Some(id) == *padding {
                        continue;
                    }
                    for (s, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *s += v;
                    }
                }
                self.accumulate(grads, *table, Tensor::from_vec(tv.shape(), dt).expect("shape"));
            }
            Op::Conv2dSame { x, w, b } => self.conv_backward(*x, *w, *b, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let d = inv_std.len();
                let rows = xhat.len() / d;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for (gr, hr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); xhat.len()];
                    if *train {
                        let n = T::from_usize(rows).expect("rows");
                        // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                        for r in 0..rows {
                            for j in 0..d {
                                let dxhat = g.data()[r * d + j] * gv[j];
                                dx[r * d + j] = inv_std[j] / n
                                    * (n * dxhat - gv[j] * dbeta[j] - xhat[r * d + j] * gv[j] * dgamma[j]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for j in 0..d {
                                dx[r * d + j] = g.data()[r * d + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx).expect("shape"));
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[d], dgamma).expect("shape"));
                self.accumulate(grads, *beta, Tensor::from_vec(&[d], dbeta).expect("shape"));
            }
            Op::SumAll(x) => {
                let s = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::SumSquares(x) => {
                let s = g.data()[0] * T::lit(2.0);
                self.accumulate(grads, *x, self.value(*x).map(|v| v * s));
            }
            Op::LstmCell {
                pre,
                c_prev,
                h_prev,
                mask,
                cache,
            } => {
                let hid = self.shape(*h_prev)[1];
                let batch = self.shape(*h_prev)[0];
                let cv = self.value(*c_prev).data();
                let mut dpre = vec![T::zero(); batch * 4 * hid];
                let mut dh_prev = vec![T::zero(); batch * hid];
                let mut dc_prev = vec![T::zero(); batch * hid];
                for r in 0..batch {
                    let gr = &g.data()[r * 2 * hid..(r + 1) * 2 * hid];
                    if mask.as_ref().is_some_and(|m| !m[r]) {
                        dh_prev[r * hid..(r + 1) * hid].copy_from_slice(&gr[..hid]);
                        dc_prev[r * hid..(r + 1) * hid].copy_from_slice(&gr[hid..]);
                        continue;
                    }
                    let cr = &cache[r * 5 * hid..(r + 1) * 5 * hid];
                    let dp = &mut dpre[r * 4 * hid..(r + 1) * 4 * hid];
                    for k in 0..hid {
                        let (i, f, gg, o, tc) = (cr[k], cr[hid + k], cr[2 * hid + k], cr[3 * hid + k], cr[4 * hid + k]);
                        let dh = gr[k];
                        let dc = gr[hid + k] + dh * o * (T::one() - tc * tc);
                        dp[k] = dc * gg * i * (T::one() - i);
                        dp[hid + k] = dc * cv[r * hid + k] * f * (T::one() - f);
                        dp[2 * hid + k] = dc * i * (T::one() - gg * gg);
                        dp[3 * hid + k] = dh * tc * o * (T::one() - o);
                        dc_prev[r * hid + k] = dc * f;
                    }
                }
                self.accumulate(grads, *pre, Tensor::from_vec(&[batch, 4 * hid], dpre).expect("shape"));
                self.accumulate(grads, *h_prev, Tensor::from_vec(&[batch, hid], dh_prev).expect("shape"));
                self.accumulate(grads, *c_prev, Tensor::from_vec(&[batch, hid], dc_prev).expect("shape"));
            }
            Op::GruCell {
                xp,
                hp,
                h_prev,
                mask,
                cache,
            } => {
                let hid = self.shape(*h_prev)[1];
                let batch = self.shape(*h_prev)[0];
                let hpv = self.value(*hp).data();
                let hv = self.value(*h_prev).data();
                let mut dx = vec![T::zero(); batch * 3 * hid];
                let mut dhp = vec![T::zero(); batch * 3 * hid];
                let mut dh_prev = vec![T::zero(); batch * hid];
                for r in 0..batch {
                    let gr = &g.data()[r * hid..(r + 1) * hid];
                    if mask.as_ref().is_some_and(|m| !m[r]) {
                        dh_prev[r * hid..(r + 1) * hid].copy_from_slice(gr);
                        continue;
                    }
                    let cr = &cache[r * 3 * hid..(r + 1) * 3 * hid];
                    for k in 0..hid {
                        let (rg, z, n) = (cr[k], cr[hid + k], cr[2 * hid + k]);
                        let dh = gr[k];
                        let dn = dh * (T::one() - z);
                        let dz = dh * (hv[r * hid + k] - n);
                        dh_prev[r * hid + k] = dh * z;
                        let dan = dn * (T::one() - n * n);
                        let dr = dan * hpv[r * 3 * hid + 2 * hid + k];
                        let dar = dr * rg * (T::one() - rg);
                        let daz = dz * z * (T::one() - z);
                        let base = r * 3 * hid;
                        dx[base + k] = dar;
                        dhp[base + k] = dar;
                        dx[base + hid + k] = daz;
                        dhp[base + hid + k] = daz;
                        dx[base + 2 * hid + k] = dan;
                        dhp[base + 2 * hid + k] = dan * rg;
                    }
                }
                self.accumulate(grads, *xp, Tensor::from_vec(&[batch, 3 * hid], dx).expect("shape"));
                self.accumulate(grads, *hp, Tensor::from_vec(&[batch, 3 * hid], dhp).expect("shape"));
                self.accumulate(grads, *h_prev, Tensor::from_vec(&[batch, hid], dh_prev).expect("shape"));
            }
        }
    }

    fn conv_backward(&self, x: Var, w: Var, b: Var, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (bn, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
        let (xv, wv, gv) = (self.value(x).data(), self.value(w).data(), g.data());
        let mut dx = vec![T::zero(); xv.len()];
        let mut dw = vec![T::zero(); wv.len()];
        let mut db = vec![T::zero(); cout];
        for n in 0..bn {
            for co in 0..cout {
                let o_base = (n * cout + co) * h * wd;
                for i in 0..h {
                    for j in 0..wd {
                        let go = gv[o_base + i * wd + j];
                        if go == T::zero() {
                            continue;
                        }
                        db[co] += go;
                        for ci in 0..cin {
                            let x_base = (n * cin + ci) * h * wd;
                            let w_base = (co * cin + ci) * kh * kw;
                            for u in 0..kh {
                                let ii = i + u;
                                if ii < pt || ii - pt >= h {
                                    continue;
                                }
                                let ii = ii - pt;
                                for v in 0..kw {
                                    let jj = j + v;
                                    if jj < pl || jj - pl >= wd {
                                        continue;
                                    }
                                    let xi = x_base + ii * wd + jj - pl;
                                    let wi = w_base + u * kw + v;
                                    dx[xi] += go * wv[wi];
                                    dw[wi] += go * xv[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.accumulate(grads, x, Tensor::from_vec(&xs, dx).expect("shape"));
        self.accumulate(grads, w, Tensor::from_vec(&ws, dw).expect("shape"));
        self.accumulate(grads, b, Tensor::from_vec(&[cout], db).expect("shape"));
    }
}
