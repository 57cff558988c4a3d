use std::sync::Arc;

use super::{numel, Tensor};
use crate::attention::AttentionMask;
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum MatMulMode {
    /// `[.., m, k] · [k, n]`: rows of `a` flattened into one product.
    BroadcastB { batches: usize },
    /// `[m, k] · [.., k, n]`.
    BroadcastA { batches: usize },
    /// Equal leading batch dimensions.
    Batched { batches: usize },
}

enum Op<S> {
    Leaf,
    MatMul { a: usize, b: usize, mode: MatMulMode, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: S },
    AddScalar { a: usize },
    Gelu { a: usize },
    Silu { a: usize },
    Normalize { a: usize, rstd: Vec<S> },
    Softmax { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Reshape { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    Embedding { table: usize, ids: Vec<usize> },
    Sum { a: usize },
    Mean { a: usize },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Linear record of every operation, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in evaluation order, which is a topological order of
/// the computation graph. Each node keeps its forward value; that value is
/// the saved activation used by the backward rules.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044715);
    let half = S::lit(0.5);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let y = half * x * (S::one() + th);
    let du = c * (S::one() + S::lit(3.0) * k * x * x);
    let dy = half * (S::one() + th) + half * x * (S::one() - th * th) * du;
    (y, dy)
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Strides of a row-major shape.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Writes `src` (shape `in_shape`) permuted by `perm` into `dst`, adding when
/// `accumulate` is set.
fn permute_into<S: Scalar>(src: &[S], in_shape: &[usize], perm: &[usize], dst: &mut [S], accumulate: bool) {
    let rank = in_shape.len();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    if src.is_empty() {
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for slot in dst.iter_mut() {
        if accumulate {
            *slot += src[offset];
        } else {
            *slot = src[offset];
        }
        // odometer over the output index
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn grad_slot<'g, S: Scalar>(
    grads: &'g mut [Option<Vec<S>>],
    nodes: &[Node<S>],
    idx: usize,
) -> Option<&'g mut Vec<S>> {
    if !nodes[idx].needs_grad {
        return None;
    }
    let len = nodes[idx].value.numel();
    Some(grads[idx].get_or_insert_with(|| vec![S::zero(); len]))
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node and its saved activations.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Drops all nodes recorded after the first `len`. Handles beyond `len`
    /// become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let value = Tensor { requires_grad: false, grad: None, ..value };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients accumulate into it when `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let needs_grad = tensor.requires_grad;
        self.nodes.push(Node { value: tensor, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k, k2, n) = (sa[ra - 2], sa[ra - 1], sb[rb - 2], sb[rb - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (ba, bb) = (&sa[..ra - 2], &sb[..rb - 2]);
        let (mode, batch_dims) = if bb.is_empty() {
            (MatMulMode::BroadcastB { batches: numel(ba) }, ba.to_vec())
        } else if ba.is_empty() {
            (MatMulMode::BroadcastA { batches: numel(bb) }, bb.to_vec())
        } else if ba == bb {
            (MatMulMode::Batched { batches: numel(ba) }, ba.to_vec())
        } else {
            return Err(Error::shape("matmul", &sa, &sb));
        };
        let mut shape = batch_dims;
        shape.extend([m, n]);
        let mut out = vec![S::zero(); numel(&shape)];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            match mode {
                MatMulMode::BroadcastB { batches } => {
                    gemm(MatRef::new(av, batches * m, k), MatRef::new(bv, k, n), &mut out, false)
                }
                MatMulMode::BroadcastA { batches } => {
                    for i in 0..batches {
                        gemm(
                            MatRef::new(av, m, k),
                            MatRef::new(&bv[i * k * n..(i + 1) * k * n], k, n),
                            &mut out[i * m * n..(i + 1) * m * n],
                            false,
                        );
                    }
                }
                MatMulMode::Batched { batches } => {
                    for i in 0..batches {
                        gemm(
                            MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k),
                            MatRef::new(&bv[i * k * n..(i + 1) * k * n], k, n),
                            &mut out[i * m * n..(i + 1) * m * n],
                            false,
                        );
                    }
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, mode, m, k, n }, &[a.0, b.0]))
    }

    /// Number of times `b` tiles `a` when `b`'s shape is a suffix of `a`'s.
    fn suffix_tiles(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(numel(&sa[..sa.len() - sb.len()]))
    }

    /// Elementwise `a + b`; `b` may be broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_tiles("add", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data = if bv.is_empty() {
            av.data().to_vec()
        } else {
            av.data()
                .chunks(bv.len())
                .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
                .collect()
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("sub", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Elementwise `a * b`; `b` may be broadcast over leading dimensions of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_tiles("mul", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data = if bv.is_empty() {
            Vec::new()
        } else {
            av.data()
                .chunks(bv.len())
                .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x * y))
                .collect()
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale { a: a.0, c }, &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar { a: a.0 }, &[a.0])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| gelu_parts(x).0);
        self.push(value, Op::Gelu { a: a.0 }, &[a.0])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push(value, Op::Silu { a: a.0 }, &[a.0])
    }

    /// Zero-mean, unit-variance normalization over the last axis.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = *x.shape().last().ok_or_else(|| Error::contract("normalize of a rank-0 tensor"))?;
        if d < 2 {
            return Err(Error::contract(format!("layer norm needs > 1 feature, got {d}")));
        }
        let eps = S::lit(LAYER_NORM_EPS);
        let inv_d = S::one() / S::lit(d as f64);
        let mut out = Vec::with_capacity(x.numel());
        let mut rstd = Vec::with_capacity(x.numel() / d);
        for row in x.data().chunks(d) {
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            out.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Normalize { a: a.0, rstd }, &[a.0]))
    }

    /// Softmax over the last axis. With a mask of shape `[Q, K]` matching the
    /// last two axes, masked logits are treated as `-inf`.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&Arc<AttentionMask>>) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let kdim = *shape.last().ok_or_else(|| Error::contract("softmax of a rank-0 tensor"))?;
        if let Some(m) = mask {
            let r = shape.len();
            if r < 2 || m.rows() != shape[r - 2] || m.cols() != kdim {
                return Err(Error::shape("masked_softmax", &shape, &[m.rows(), m.cols()]));
            }
            m.check_row_coverage()?;
        } else if kdim == 0 {
            return Err(Error::InvalidMask("softmax over an empty axis".into()));
        }
        let mut out = vec![S::zero(); x.numel()];
        for (row_idx, (row, dst)) in x.data().chunks(kdim).zip(out.chunks_mut(kdim)).enumerate() {
            let allowed: Option<&[bool]> = mask.map(|m| m.row(row_idx % m.rows()));
            let keep = |j: usize| allowed.map_or(true, |bits| bits[j]);
            let mut max = S::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            let mut sum = S::zero();
            for (j, (&v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    *d = e;
                    sum += e;
                }
            }
            let inv = S::one() / sum;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { a: a.0 }, &[a.0]))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax(a, None)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut out = vec![S::zero(); numel(&shape)];
        permute_into(self.value(a).data(), &shape, perm, &mut out, false);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Permute { a: a.0, perm: perm.to_vec() }, &[a.0]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { a: a.0 }, &[a.0]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::Concat { parts: ids.clone(), axis }, &ids))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).narrow(axis, start, len)?;
        Ok(self.push(value, Op::Narrow { a: a.0, axis, start }, &[a.0]))
    }

    pub fn split(&mut self, a: Var, axis: usize, lengths: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(a);
        if axis >= shape.len() || lengths.iter().sum::<usize>() != shape[axis] {
            return Err(Error::shape("split", shape, lengths));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(lengths.len());
        for &len in lengths {
            out.push(self.narrow(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Row lookup: `table[ids[i]]` for each id, giving `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding", t.shape(), &[]));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new([ids.len(), d], data)?;
        Ok(self.push(value, Op::Embedding { table: table.0, ids: ids.to_vec() }, &[table.0]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<S>();
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().copied().sum::<S>() / S::lit(x.numel().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean { a: a.0 }, &[a.0])
    }

    /// `x · w + b` for `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Normalization over the last axis followed by a per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.normalize(x)?;
        let g = self.mul(n, gain)?;
        self.add(g, bias)
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse pass from a scalar `loss`. Gradients are added to the `grad`
    /// buffer of every leaf that requires them, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 || lv.rank() > 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::contract("loss does not depend on any tensor requiring grad"));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
            } else {
                self.propagate(i, &g, &mut grads);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves handled by backward"),
            &Op::MatMul { a, b, mode, m, k, n } => {
                let av = nodes[a].value.data();
                let bv = nodes[b].value.data();
                if let Some(da) = grad_slot(grads, nodes, a) {
                    match mode {
                        MatMulMode::BroadcastB { batches } => gemm(
                            MatRef::new(g, batches * m, n),
                            MatRef::new(bv, k, n).t(),
                            da,
                            true,
                        ),
                        MatMulMode::BroadcastA { batches } => {
                            for bi in 0..batches {
                                gemm(
                                    MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                                    MatRef::new(&bv[bi * k * n..(bi + 1) * k * n], k, n).t(),
                                    da,
                                    true,
                                );
                            }
                        }
                        MatMulMode::Batched { batches } => {
                            for bi in 0..batches {
                                gemm(
                                    MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                                    MatRef::new(&bv[bi * k * n..(bi + 1) * k * n], k, n).t(),
                                    &mut da[bi * m * k..(bi + 1) * m * k],
                                    true,
                                );
                            }
                        }
                    }
                }
                if let Some(db) = grad_slot(grads, nodes, b) {
                    match mode {
                        MatMulMode::BroadcastB { batches } => gemm(
                            MatRef::new(av, batches * m, k).t(),
                            MatRef::new(g, batches * m, n),
                            db,
                            true,
                        ),
                        MatMulMode::BroadcastA { batches } | MatMulMode::Batched { batches } => {
                            let shared_a = matches!(mode, MatMulMode::BroadcastA { .. });
                            for bi in 0..batches {
                                let a_slice = if shared_a { av } else { &av[bi * m * k..(bi + 1) * m * k] };
                                gemm(
                                    MatRef::new(a_slice, m, k).t(),
                                    MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                                    &mut db[bi * k * n..(bi + 1) * k * n],
                                    true,
                                );
                            }
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(da) = grad_slot(grads, nodes, a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if let Some(db) = grad_slot(grads, nodes, b) {
                    if !db.is_empty() {
                        for row in g.chunks(db.len()) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
            &Op::Sub { a, b } => {
                if let Some(da) = grad_slot(grads, nodes, a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if let Some(db) = grad_slot(grads, nodes, b) {
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
                }
            }
            &Op::Mul { a, b } => {
                let av = nodes[a].value.data();
                let bv = nodes[b].value.data();
                if bv.is_empty() {
                    return;
                }
                if let Some(da) = grad_slot(grads, nodes, a) {
                    for (drow, grow) in da.chunks_mut(bv.len()).zip(g.chunks(bv.len())) {
                        for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(bv) {
                            *d += gv * y;
                        }
                    }
                }
                if let Some(db) = grad_slot(grads, nodes, b) {
                    for (arow, grow) in av.chunks(bv.len()).zip(g.chunks(bv.len())) {
                        for ((d, &gv), &x) in db.iter_mut().zip(grow).zip(arow) {
                            *d += gv * x;
                        }
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(da) = grad_slot(grads, nodes, a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v * c);
                }
            }
            &Op::AddScalar { a } | &Op::Reshape { a } => {
                if let Some(da) = grad_slot(grads, nodes, a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            &Op::Gelu { a } => {
                let x = nodes[a].value.data();
                if let Some(da) = grad_slot(grads, nodes, a) {
                    for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                        *d += gv * gelu_parts(xv).1;
                    }
                }
            }
            &Op::Silu { a } => {
                let x = nodes[a].value.data();
                if let Some(da) = grad_slot(grads, nodes, a) {
                    for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                        let s = sigmoid(xv);
                        *d += gv * s * (S::one() + xv * (S::one() - s));
                    }
                }
            }
            Op::Normalize { a, rstd } => {
                let y = out.data();
                let dim = *out.shape().last().expect("rank >= 1");
                let inv_d = S::one() / S::lit(dim as f64);
                if let Some(da) = grad_slot(grads, nodes, *a) {
                    for (((drow, grow), yrow), &r) in da
                        .chunks_mut(dim)
                        .zip(g.chunks(dim))
                        .zip(y.chunks(dim))
                        .zip(rstd)
                    {
                        let gmean = grow.iter().copied().sum::<S>() * inv_d;
                        let gy = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum::<S>() * inv_d;
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += r * (gv - gmean - yv * gy);
                        }
                    }
                }
            }
            &Op::Softmax { a } => {
                let y = out.data();
                let dim = *out.shape().last().expect("rank >= 1");
                if let Some(da) = grad_slot(grads, nodes, a) {
                    for ((drow, grow), yrow) in da.chunks_mut(dim).zip(g.chunks(dim)).zip(y.chunks(dim)) {
                        let dot = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum::<S>();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                if let Some(da) = grad_slot(grads, nodes, *a) {
                    permute_into(g, out.shape(), &inverse, da, true);
                }
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let shape = out.shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let full = shape[axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.shape()[axis] * inner;
                    if let Some(dp) = grad_slot(grads, nodes, p) {
                        for o in 0..outer {
                            let src = &g[o * full + offset..o * full + offset + len];
                            dp[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    }
                    offset += len;
                }
            }
            &Op::Narrow { a, axis, start } => {
                let in_shape = nodes[a].value.shape();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let full = in_shape[axis] * inner;
                let len = out.shape()[axis] * inner;
                if let Some(da) = grad_slot(grads, nodes, a) {
                    for o in 0..outer {
                        let base = o * full + start * inner;
                        da[base..base + len]
                            .iter_mut()
                            .zip(&g[o * len..(o + 1) * len])
                            .for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[*table].value.shape()[1];
                if let Some(dt) = grad_slot(grads, nodes, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(t, &v)| *t += v);
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(da) = grad_slot(grads, nodes, a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean { a } => {
                let inv = S::one() / S::lit(nodes[a].value.numel().max(1) as f64);
                if let Some(da) = grad_slot(grads, nodes, a) {
                    da.iter_mut().for_each(|d| *d += g[0] * inv);
                }
            }
        }
    }
}
