use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::params::{Gradients, ParamId, ParamStore};
use crate::tensor::shape::{broadcast, broadcast_strides, for_each_pair, split_at_axis};
use crate::tensor::Tensor;

/// Handle to a node of a [`Record`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed linear-interpolation stencil: query `q` reads
/// `w0 * y[i0] + w1 * y[i1]` along the interpolated axis.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpIndex<T> {
    pub(crate) source_len: usize,
    pub(crate) stencil: Vec<(usize, usize, T, T)>,
}

impl<T: Scalar> InterpIndex<T> {
    pub fn new(source_len: usize, stencil: Vec<(usize, usize, T, T)>) -> Result<Self> {
        if stencil.iter().any(|&(a, b, _, _)| a >= source_len || b >= source_len) {
            return Err(Error::InvalidArgument(
                "interpolation stencil index out of range".into(),
            ));
        }
        Ok(Self { source_len, stencil })
    }

    pub fn len(&self) -> usize {
        self.stencil.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stencil.is_empty()
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Matmul(Var, Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Softmax(Var),
    Concat(Vec<Var>, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Slice(Var, usize, usize),
    Reshape(Var),
    Transpose(Var),
    Interp(Var, usize, Arc<InterpIndex<T>>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// A record is single-use for differentiation: after [`Record::backward`] the
/// caller builds a new one for the next forward pass.
pub struct Record<'p, T> {
    nodes: Vec<Node<T>>,
    store: Option<&'p ParamStore<T>>,
    bound: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Scalar> Default for Record<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Record<'p, T> {
    /// A record without trainable parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            bound: HashMap::new(),
            consumed: false,
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn nonempty(&self, op: &'static str, v: Var) -> Result<&Tensor<T>> {
        let t = &self.nodes[v.0].value;
        if t.is_empty() {
            return Err(Error::EmptyTensor { op });
        }
        Ok(t)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Binds a registered parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self
            .store
            .expect("Record::param called on a record without a parameter store");
        let v = self.push(Op::Leaf, store.get(id).clone(), true);
        self.bound.insert(id, v);
        v
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let ta = self.nonempty(name, a)?;
        let tb = self.nonempty(name, b)?;
        let out_shape = broadcast(name, ta.shape(), tb.shape())?;
        let data = if ta.shape() == tb.shape() {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let (da, db) = (ta.data(), tb.data());
            let mut out = vec![T::zero(); out_shape.iter().product()];
            for_each_pair(&out_shape, &sa, &sb, |o, i, j| out[o] = f(da[i], db[j]));
            out
        };
        let value = Tensor::new(out_shape, data)?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(op, value, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.nonempty("scale", a)?.map(|x| x * c);
        let g = self.grad_any(&[a]);
        Ok(self.push(Op::Scale(a, c), value, g))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.nonempty(name, a)?.map(f);
        let g = self.grad_any(&[a]);
        Ok(self.push(op, value, g))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, T::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, T::exp, Op::Exp(a))
    }

    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`.
    /// Both operands must have the same rank; batch axes broadcast on size 1.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.nonempty("matmul", a)?;
        let tb = self.nonempty("matmul", b)?;
        let (sa, sb) = (ta.shape(), tb.shape());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[r - 1] != sb[r - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch = broadcast("matmul", &sa[..r - 2], &sb[..r - 2])
            .map_err(|_| Error::shape("matmul", sa, sb))?;
        let pairs = batch_pairs(&batch, &sa[..r - 2], &sb[..r - 2]);
        let mut out = vec![T::zero(); pairs.len() * m * n];
        let (da, db) = (ta.data(), tb.data());
        for &(o, ia, ib) in &pairs {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                (&da[ia * m * k..(ia + 1) * m * k], k as isize, 1),
                (&db[ib * k * n..(ib + 1) * k * n], n as isize, 1),
                T::zero(),
                (&mut out[o * m * n..(o + 1) * m * n], n as isize, 1),
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(Op::Matmul(a, b), value, g))
    }

    /// Softmax over the last axis. Entries equal to `-inf` get weight exactly 0.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.nonempty("softmax", a)?;
        let shape = t.shape().to_vec();
        if shape.is_empty() {
            return Err(Error::InvalidAxis {
                op: "softmax",
                axis: 0,
                rank: 0,
            });
        }
        let n = *shape.last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        let value = Tensor::new(shape, out)?;
        let g = self.grad_any(&[a]);
        Ok(self.push(Op::Softmax(a), value, g))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.nonempty("concat", first)?.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.nonempty("concat", p)?.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let g = self.grad_any(parts);
        Ok(self.push(Op::Concat(parts.to_vec(), axis), value, g))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        let t = self.nonempty(name, a)?;
        if axis >= t.rank() {
            return Err(Error::InvalidAxis {
                op: name,
                axis,
                rank: t.rank(),
            });
        }
        let (outer, len, inner) = split_at_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += x;
                }
            }
        }
        if mean {
            let n = T::from_usize(len).unwrap();
            for x in &mut out {
                *x = *x / n;
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        let g = self.grad_any(&[a]);
        let op = if mean { Op::Mean(a, axis) } else { Op::Sum(a, axis) };
        Ok(self.push(op, value, g))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.nonempty("sum_all", a)?.sum());
        let g = self.grad_any(&[a]);
        Ok(self.push(Op::SumAll(a), value, g))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = self.nonempty("mean_all", a)?;
        let value = Tensor::scalar(t.sum() / T::from_usize(t.numel()).unwrap());
        let g = self.grad_any(&[a]);
        Ok(self.push(Op::MeanAll(a), value, g))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.nonempty("slice", a)?;
        if axis >= t.rank() {
            return Err(Error::InvalidAxis {
                op: "slice",
                axis,
                rank: t.rank(),
            });
        }
        let (outer, len, inner) = split_at_axis(t.shape(), axis);
        if start >= end || end > len {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{end} out of range for axis {axis} of {:?}",
                t.shape()
            )));
        }
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let value = Tensor::new(shape, out)?;
        let g = self.grad_any(&[a]);
        Ok(self.push(Op::Slice(a, axis, start), value, g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nonempty("reshape", a)?.clone().reshaped(shape.to_vec())?;
        let g = self.grad_any(&[a]);
        Ok(self.push(Op::Reshape(a), value, g))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.nonempty("transpose", a)?;
        let r = t.rank();
        if r < 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let value = transpose_last2(t);
        let g = self.grad_any(&[a]);
        Ok(self.push(Op::Transpose(a), value, g))
    }

    /// Gathers interpolated slices along `axis`: output position `q` along
    /// that axis is `w0 * a[i0] + w1 * a[i1]` for stencil entry `q`.
    pub fn interp(&mut self, a: Var, axis: usize, index: Arc<InterpIndex<T>>) -> Result<Var> {
        let t = self.nonempty("interp", a)?;
        if axis >= t.rank() {
            return Err(Error::InvalidAxis {
                op: "interp",
                axis,
                rank: t.rank(),
            });
        }
        let (outer, len, inner) = split_at_axis(t.shape(), axis);
        if len != index.source_len {
            return Err(Error::shape("interp", t.shape(), &[index.source_len]));
        }
        let m = index.stencil.len();
        let d = t.data();
        let mut out = vec![T::zero(); outer * m * inner];
        for o in 0..outer {
            let src = &d[o * len * inner..(o + 1) * len * inner];
            let dst = &mut out[o * m * inner..(o + 1) * m * inner];
            for (q, &(i0, i1, w0, w1)) in index.stencil.iter().enumerate() {
                let (r0, r1) = (&src[i0 * inner..(i0 + 1) * inner], &src[i1 * inner..(i1 + 1) * inner]);
                for (c, x) in dst[q * inner..(q + 1) * inner].iter_mut().enumerate() {
                    *x = w0 * r0[c] + w1 * r1[c];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = m;
        let value = Tensor::new(shape, out)?;
        let g = self.grad_any(&[a]);
        Ok(self.push(Op::Interp(a, axis, index), value, g))
    }

    /// Reverse pass from a single-element `loss`.
    ///
    /// Returns a gradient for every parameter of the store the record was
    /// built with (zeros for parameters that were never bound) and for every
    /// leaf created with [`Record::leaf`]. The record cannot be
    /// differentiated again afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::RecordConsumed);
        }
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lt.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }

        let params = match self.store {
            Some(store) => store
                .ids()
                .map(|id| match self.bound.get(&id) {
                    Some(v) => grads[v.0]
                        .clone()
                        .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec())),
                    None => Tensor::zeros(store.get(id).shape().to_vec()),
                })
                .collect(),
            None => Vec::new(),
        };
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if wants(*a) {
                    accumulate(grads, *a, reduce_to(g, val(*a).shape(), |x, _| x));
                }
                if wants(*b) {
                    accumulate(grads, *b, reduce_to(g, val(*b).shape(), |x, _| x * sign));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    accumulate(grads, *a, reduce_product(g, tb, ta.shape()));
                }
                if wants(*b) {
                    accumulate(grads, *b, reduce_product(g, ta, tb.shape()));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                accumulate(grads, *a, zip_map(g, y, |gx, yx| gx * (T::one() - yx * yx)));
            }
            Op::Relu(a) => {
                let x = val(*a);
                accumulate(
                    grads,
                    *a,
                    zip_map(g, x, |gx, xx| if xx > T::zero() { gx } else { T::zero() }),
                );
            }
            Op::Exp(a) => {
                accumulate(grads, *a, zip_map(g, &node.value, |gx, yx| gx * yx));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut out = vec![T::zero(); y.numel()];
                for ((orow, yrow), grow) in out
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let dot: T = yrow.iter().zip(grow).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in orow.iter_mut().zip(yrow).zip(grow) {
                        *o = p * (q - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::Matmul(a, b) => self.matmul_backward(*a, *b, g, grads)?,
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_at_axis(g.shape(), *axis);
                let mut start = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if wants(p) {
                        let mut out = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            out.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        accumulate(grads, p, Tensor::new(val(p).shape().to_vec(), out)?);
                    }
                    start += len;
                }
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let shape = val(*a).shape();
                let (outer, len, inner) = split_at_axis(shape, *axis);
                let factor = if matches!(node.op, Op::Mean(..)) {
                    T::one() / T::from_usize(len).unwrap()
                } else {
                    T::one()
                };
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        out.extend(src.iter().map(|&x| x * factor));
                    }
                }
                accumulate(grads, *a, Tensor::new(shape.to_vec(), out)?);
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                let shape = val(*a).shape();
                let mut gx = g.item();
                if matches!(node.op, Op::MeanAll(_)) {
                    gx = gx / T::from_usize(val(*a).numel()).unwrap();
                }
                accumulate(grads, *a, Tensor::full(shape.to_vec(), gx));
            }
            Op::Slice(a, axis, start) => {
                let shape = val(*a).shape();
                let (outer, len, inner) = split_at_axis(shape, *axis);
                let width = g.shape()[*axis];
                let mut out = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    out[dst..dst + width * inner]
                        .copy_from_slice(&g.data()[o * width * inner..(o + 1) * width * inner]);
                }
                accumulate(grads, *a, Tensor::new(shape.to_vec(), out)?);
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, g.clone().reshaped(val(*a).shape().to_vec())?);
            }
            Op::Transpose(a) => accumulate(grads, *a, transpose_last2(g)),
            Op::Interp(a, axis, index) => {
                let shape = val(*a).shape();
                let (outer, len, inner) = split_at_axis(shape, *axis);
                let m = index.stencil.len();
                let mut out = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let src = &g.data()[o * m * inner..(o + 1) * m * inner];
                    let dst = &mut out[o * len * inner..(o + 1) * len * inner];
                    for (q, &(i0, i1, w0, w1)) in index.stencil.iter().enumerate() {
                        for c in 0..inner {
                            let gq = src[q * inner + c];
                            dst[i0 * inner + c] += w0 * gq;
                            dst[i1 * inner + c] += w1 * gq;
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(shape.to_vec(), out)?);
            }
        }
        Ok(())
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch = &g.shape()[..r - 2];
        let pairs = batch_pairs(batch, &sa[..r - 2], &sb[..r - 2]);
        let gd = g.data();
        if self.nodes[a.0].needs_grad {
            let mut da = vec![T::zero(); ta.numel()];
            for &(o, ia, ib) in &pairs {
                // dA += G B^T
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    (&gd[o * m * n..(o + 1) * m * n], n as isize, 1),
                    (&tb.data()[ib * k * n..(ib + 1) * k * n], 1, n as isize),
                    T::one(),
                    (&mut da[ia * m * k..(ia + 1) * m * k], k as isize, 1),
                );
            }
            accumulate(grads, a, Tensor::new(sa.to_vec(), da)?);
        }
        if self.nodes[b.0].needs_grad {
            let mut db = vec![T::zero(); tb.numel()];
            for &(o, ia, ib) in &pairs {
                // dB += A^T G
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    (&ta.data()[ia * m * k..(ia + 1) * m * k], 1, k as isize),
                    (&gd[o * m * n..(o + 1) * m * n], n as isize, 1),
                    T::one(),
                    (&mut db[ib * k * n..(ib + 1) * k * n], n as isize, 1),
                );
            }
            accumulate(grads, b, Tensor::new(sb.to_vec(), db)?);
        }
        Ok(())
    }
}

/// `(out, a, b)` matrix indices for every batch position.
fn batch_pairs(batch: &[usize], a: &[usize], b: &[usize]) -> Vec<(usize, usize, usize)> {
    let sa = broadcast_strides(a, batch);
    let sb = broadcast_strides(b, batch);
    let mut pairs = Vec::with_capacity(batch.iter().product());
    for_each_pair(batch, &sa, &sb, |o, i, j| pairs.push((o, i, j)));
    pairs
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (x, &y) in acc.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Sums `f(g, 0)` over the axes along which `target` was broadcast.
fn reduce_to<T: Scalar>(g: &Tensor<T>, target: &[usize], f: impl Fn(T, T) -> T) -> Tensor<T> {
    if g.shape() == target {
        return g.map(|x| f(x, T::zero()));
    }
    let st = broadcast_strides(target, g.shape());
    let zero = vec![0; target.len()];
    let mut out = vec![T::zero(); target.iter().product()];
    let gd = g.data();
    for_each_pair(g.shape(), &st, &zero, |o, t, _| out[t] += f(gd[o], T::zero()));
    Tensor::new(target.to_vec(), out).expect("target shape")
}

/// Gradient of an elementwise product for the operand of shape `target`,
/// where `other` is the remaining factor.
fn reduce_product<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    let out_shape = g.shape();
    if other.shape() == out_shape && target == out_shape {
        return zip_map(g, other, |x, y| x * y);
    }
    let st = broadcast_strides(target, out_shape);
    let so = broadcast_strides(other.shape(), out_shape);
    let mut out = vec![T::zero(); target.iter().product()];
    let (gd, od) = (g.data(), other.data());
    for_each_pair(out_shape, &st, &so, |o, t, j| out[t] += gd[o] * od[j]);
    Tensor::new(target.to_vec(), out).expect("target shape")
}

fn transpose_last2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let r = s.len();
    let (rows, cols) = (s[r - 2], s[r - 1]);
    let batch = t.numel() / (rows * cols).max(1);
    let mut out = vec![T::zero(); t.numel()];
    let d = t.data();
    for bi in 0..batch {
        let base = bi * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] = d[base + i * cols + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out).expect("transposed shape")
}
