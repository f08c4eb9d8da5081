//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: tensors are appended in execution order, so the
//! node list is always topologically sorted and [`Graph::backward`] is a
//! single reverse sweep. Tensors are immutable once produced; only their
//! gradient buffers accumulate. A graph and its tensors belong to one
//! logical thread; independent graphs may run on independent threads.
//!
//! Element storage is generic over [`Element`] (`f32` in the production
//! path, `f64` for finite-difference verification). Reductions accumulate
//! in 64-bit regardless of the storage type.

mod shape;

use num_traits::Float;

use crate::error::{Error, Result};

pub use shape::{broadcast_shapes, numel, strides};

/// Float storage type for tensor data.
pub trait Element: Float + std::fmt::Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a tensor inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Operation that produced a non-leaf tensor, with its input references.
#[derive(Debug, Clone)]
pub enum Op {
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Scale { x: TensorId, factor: f64 },
    Transpose { x: TensorId, ax0: usize, ax1: usize },
    Reshape { x: TensorId },
    Concat { inputs: Vec<TensorId>, axis: usize },
    Slice { x: TensorId, axis: usize, start: usize },
    Softmax { x: TensorId, axis: usize },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Gelu { x: TensorId },
    SumAll { x: TensorId },
    CrossEntropy { logits: TensorId, labels: Vec<usize> },
}

/// One tensor on the tape.
#[derive(Debug, Clone)]
pub struct Tensor<T: Element> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
    /// Producing operation; `None` for leaves.
    pub node: Option<Op>,
}

/// Computation tape. Node order is the topological order.
#[derive(Debug, Default)]
pub struct Graph<T: Element> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            tensors: Vec::new(),
        }
    }

    // ── leaves and accessors ────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, None))
    }

    pub fn zeros(&mut self, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        self.leaf(vec![T::zero(); numel(shape)], shape, requires_grad)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.tensors[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self, id: TensorId) {
        self.tensors[id.0].grad = None;
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    fn push(
        &mut self,
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<Op>,
    ) -> TensorId {
        self.tensors.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
            node,
        });
        TensorId(self.tensors.len() - 1)
    }

    fn any_requires_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.tensors[id.0].requires_grad)
    }

    // ── forward ops ─────────────────────────────────────────────────

    /// Matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::Dimension {
                context: "matmul (rank >= 2 required)",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != k2 {
            return Err(Error::Dimension {
                context: "matmul inner dimensions",
                lhs: ash,
                rhs: bsh,
            });
        }
        let batch_a = &ash[..ash.len() - 2];
        let batch_b = &bsh[..bsh.len() - 2];
        let batch = broadcast_shapes("matmul batch dimensions", batch_a, batch_b)?;
        let offs_a = shape::batch_offsets(&batch, batch_a, m * k);
        let offs_b = shape::batch_offsets(&batch, batch_b, k * n);

        let mut out = vec![T::zero(); numel(&batch) * m * n];
        {
            let ad = &self.tensors[a.0].data;
            let bd = &self.tensors[b.0].data;
            for (bi, (&oa, &ob)) in offs_a.iter().zip(&offs_b).enumerate() {
                matmul_2d(
                    &ad[oa..oa + m * k],
                    &bd[ob..ob + k * n],
                    m,
                    k,
                    n,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(out, out_shape, rg, Some(Op::MatMul { a, b })))
    }

    /// Elementwise addition with right-aligned broadcasting.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes("add", &ash, &bsh)?;
        let sa = shape::broadcast_strides(&ash, &out_shape);
        let sb = shape::broadcast_strides(&bsh, &out_shape);
        let mut out = vec![T::zero(); numel(&out_shape)];
        {
            let ad = &self.tensors[a.0].data;
            let bd = &self.tensors[b.0].data;
            shape::zip_broadcast(&out_shape, &sa, &sb, |oi, ai, bi| {
                out[oi] = ad[ai] + bd[bi];
            });
        }
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(out, out_shape, rg, Some(Op::Add { a, b })))
    }

    /// Multiplication by a compile-time-known scalar constant.
    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId> {
        let f = T::from_f64(factor);
        let data: Vec<T> = self.tensors[x.0].data.iter().map(|&v| v * f).collect();
        let sh = self.shape(x).to_vec();
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(data, sh, rg, Some(Op::Scale { x, factor })))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: TensorId, ax0: usize, ax1: usize) -> Result<TensorId> {
        let in_shape = self.shape(x).to_vec();
        for &ax in &[ax0, ax1] {
            if ax >= in_shape.len() {
                return Err(Error::InvalidAxis {
                    axis: ax,
                    shape: in_shape,
                });
            }
        }
        let (data, out_shape) = transpose_copy(&self.tensors[x.0].data, &in_shape, ax0, ax1);
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(data, out_shape, rg, Some(Op::Transpose { x, ax0, ax1 })))
    }

    pub fn reshape(&mut self, x: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        if numel(new_shape) != self.tensors[x.0].data.len() {
            return Err(Error::Dimension {
                context: "reshape element count",
                lhs: self.shape(x).to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let data = self.tensors[x.0].data.clone();
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(data, new_shape.to_vec(), rg, Some(Op::Reshape { x })))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidAxis {
                axis,
                shape: first,
            });
        }
        let mut axis_total = 0;
        for &id in inputs {
            let sh = self.shape(id);
            let compatible = sh.len() == first.len()
                && sh
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (&a, &b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Dimension {
                    context: "concat",
                    lhs: first,
                    rhs: sh.to_vec(),
                });
            }
            axis_total += sh[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();

        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &id in inputs {
                let t = &self.tensors[id.0];
                let span = t.shape[axis] * inner;
                out.extend_from_slice(&t.data[o * span..(o + 1) * span]);
            }
        }
        let rg = self.any_requires_grad(inputs);
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        Ok(self.push(out, out_shape, rg, Some(op)))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let in_shape = self.shape(x).to_vec();
        if axis >= in_shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                shape: in_shape,
            });
        }
        if len == 0 || start + len > in_shape[axis] {
            return Err(Error::contract(format!(
                "slice {start}..{} out of range for axis {axis} of {in_shape:?}",
                start + len
            )));
        }
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let span_in = in_shape[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * span_in + start * inner;
            out.extend_from_slice(&self.tensors[x.0].data[base..base + len * inner]);
        }
        let mut out_shape = in_shape;
        out_shape[axis] = len;
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(out, out_shape, rg, Some(Op::Slice { x, axis, start })))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let sh = self.shape(x).to_vec();
        if axis >= sh.len() {
            return Err(Error::InvalidAxis { axis, shape: sh });
        }
        if self.tensors[x.0].data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let (outer, size, inner) = split_axis(&sh, axis);
        let xd = &self.tensors[x.0].data;
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * size * inner + j * inner + i;
                let mut max = xd[at(0)];
                for j in 1..size {
                    max = max.max(xd[at(j)]);
                }
                let mut denom = 0.0f64;
                for j in 0..size {
                    let e = (xd[at(j)] - max).exp();
                    out[at(j)] = e;
                    denom += e.as_f64();
                }
                for j in 0..size {
                    out[at(j)] = T::from_f64(out[at(j)].as_f64() / denom);
                }
            }
        }
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(out, sh, rg, Some(Op::Softmax { x, axis })))
    }

    /// Normalizes the last axis to mean 0 / population variance 1, then
    /// applies the affine pair `gamma`/`beta` (both of that axis length).
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let sh = self.shape(x).to_vec();
        let d = *sh.last().ok_or_else(|| Error::InvalidAxis {
            axis: 0,
            shape: vec![],
        })?;
        for &p in &[gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension {
                    context: "layer_norm affine parameters",
                    lhs: sh,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let xd = &self.tensors[x.0].data;
        let gd = &self.tensors[gamma.0].data;
        let bd = &self.tensors[beta.0].data;
        let rows = xd.len() / d;
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let (mean, var) = row_mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                let xhat = (row[c].as_f64() - mean) * inv;
                out[r * d + c] = T::from_f64(gd[c].as_f64() * xhat + bd[c].as_f64());
            }
        }
        let rg = self.any_requires_grad(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            eps,
        };
        Ok(self.push(out, sh, rg, Some(op)))
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<T> = self.tensors[x.0]
            .data
            .iter()
            .map(|&v| gelu_scalar(v))
            .collect();
        let sh = self.shape(x).to_vec();
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(data, sh, rg, Some(Op::Gelu { x })))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let mut acc = 0.0f64;
        for v in &self.tensors[x.0].data {
            acc += v.as_f64();
        }
        let rg = self.any_requires_grad(&[x]);
        Ok(self.push(vec![T::from_f64(acc)], vec![1], rg, Some(Op::SumAll { x })))
    }

    /// Mean over rows of `-(logit_label - logsumexp(logits))`, as a `[1]`
    /// tensor. `logits` must be `[batch, classes]`.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let sh = self.shape(logits).to_vec();
        if sh.len() != 2 {
            return Err(Error::Dimension {
                context: "cross_entropy logits (rank 2 required)",
                lhs: sh,
                rhs: vec![labels.len()],
            });
        }
        let (b, c) = (sh[0], sh[1]);
        if labels.len() != b {
            return Err(Error::contract(format!(
                "cross_entropy: {} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let xd = &self.tensors[logits.0].data;
        let mut total = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let row = &xd[i * c..(i + 1) * c];
            total += row_lse(row) - row[y].as_f64();
        }
        let loss = total / b as f64;
        let rg = self.any_requires_grad(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
        };
        Ok(self.push(vec![T::from_f64(loss)], vec![1], rg, Some(op)))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`: populates `grad` on every
    /// `requires_grad` leaf (zeros where the loss does not depend on it).
    /// Gradients accumulate additively; callers zero them between steps.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensors[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.accumulate_grad(loss, &[T::one()]);
        for idx in (0..=loss.0).rev() {
            if self.tensors[idx].grad.is_none() || self.tensors[idx].node.is_none() {
                continue;
            }
            let upstream = std::mem::take(&mut self.tensors[idx].grad).unwrap();
            let op = self.tensors[idx].node.clone().unwrap();
            self.backprop_op(&op, TensorId(idx), &upstream);
            self.tensors[idx].grad = Some(upstream);
        }
        // Leaves the loss never touched still get a zero gradient.
        for t in &mut self.tensors {
            if t.requires_grad && t.node.is_none() && t.grad.is_none() {
                t.grad = Some(vec![T::zero(); t.data.len()]);
            }
        }
        Ok(())
    }

    fn accumulate_grad(&mut self, id: TensorId, contribution: &[T]) {
        if !self.tensors[id.0].requires_grad {
            return;
        }
        let n = self.tensors[id.0].data.len();
        let g = self.tensors[id.0].grad.get_or_insert_with(|| vec![T::zero(); n]);
        for (gi, &ci) in g.iter_mut().zip(contribution) {
            *gi = *gi + ci;
        }
    }

    fn backprop_op(&mut self, op: &Op, out: TensorId, up: &[T]) {
        match *op {
            Op::MatMul { a, b } => self.backprop_matmul(a, b, out, up),
            Op::Add { a, b } => {
                let out_shape = self.shape(out).to_vec();
                for &side in &[a, b] {
                    if !self.tensors[side.0].requires_grad {
                        continue;
                    }
                    let ssh = self.shape(side).to_vec();
                    let st = shape::broadcast_strides(&ssh, &out_shape);
                    let mut contrib = vec![T::zero(); numel(&ssh)];
                    let zero = vec![0usize; out_shape.len()];
                    shape::zip_broadcast(&out_shape, &st, &zero, |oi, si, _| {
                        contrib[si] = contrib[si] + up[oi];
                    });
                    self.accumulate_grad(side, &contrib);
                }
            }
            Op::Scale { x, factor } => {
                let f = T::from_f64(factor);
                let contrib: Vec<T> = up.iter().map(|&g| g * f).collect();
                self.accumulate_grad(x, &contrib);
            }
            Op::Transpose { x, ax0, ax1 } => {
                let out_shape = self.shape(out).to_vec();
                let (contrib, _) = transpose_copy(up, &out_shape, ax0, ax1);
                self.accumulate_grad(x, &contrib);
            }
            Op::Reshape { x } => self.accumulate_grad(x, up),
            Op::Concat { ref inputs, axis } => {
                let out_shape = self.shape(out).to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let out_span = out_shape[axis] * inner;
                let mut axis_start = 0;
                for &id in inputs {
                    let span = self.shape(id)[axis] * inner;
                    if self.tensors[id.0].requires_grad {
                        let mut contrib = Vec::with_capacity(outer * span);
                        for o in 0..outer {
                            let base = o * out_span + axis_start * inner;
                            contrib.extend_from_slice(&up[base..base + span]);
                        }
                        self.accumulate_grad(id, &contrib);
                    }
                    axis_start += self.shape(id)[axis];
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(x).to_vec();
                let len = self.shape(out)[axis];
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let span_in = in_shape[axis] * inner;
                let mut contrib = vec![T::zero(); numel(&in_shape)];
                for o in 0..outer {
                    let base = o * span_in + start * inner;
                    let src = &up[o * len * inner..(o + 1) * len * inner];
                    for (dst, &g) in contrib[base..base + len * inner].iter_mut().zip(src) {
                        *dst = g;
                    }
                }
                self.accumulate_grad(x, &contrib);
            }
            Op::Softmax { x, axis } => {
                let sh = self.shape(out).to_vec();
                let (outer, size, inner) = split_axis(&sh, axis);
                let y = &self.tensors[out.0].data;
                let mut contrib = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * size * inner + j * inner + i;
                        let mut dot = 0.0f64;
                        for j in 0..size {
                            dot += up[at(j)].as_f64() * y[at(j)].as_f64();
                        }
                        for j in 0..size {
                            let v = y[at(j)].as_f64() * (up[at(j)].as_f64() - dot);
                            contrib[at(j)] = T::from_f64(v);
                        }
                    }
                }
                self.accumulate_grad(x, &contrib);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                self.backprop_layer_norm(x, gamma, beta, eps, up);
            }
            Op::Gelu { x } => {
                let contrib: Vec<T> = self.tensors[x.0]
                    .data
                    .iter()
                    .zip(up)
                    .map(|(&v, &g)| g * gelu_grad_scalar(v))
                    .collect();
                self.accumulate_grad(x, &contrib);
            }
            Op::SumAll { x } => {
                let contrib = vec![up[0]; self.tensors[x.0].data.len()];
                self.accumulate_grad(x, &contrib);
            }
            Op::CrossEntropy { logits, ref labels } => {
                let sh = self.shape(logits).to_vec();
                let (b, c) = (sh[0], sh[1]);
                let g = up[0].as_f64() / b as f64;
                let xd = &self.tensors[logits.0].data;
                let mut contrib = vec![T::zero(); xd.len()];
                for (i, &y) in labels.iter().enumerate() {
                    let row = &xd[i * c..(i + 1) * c];
                    let lse = row_lse(row);
                    for j in 0..c {
                        let p = (row[j].as_f64() - lse).exp();
                        let indicator = if j == y { 1.0 } else { 0.0 };
                        contrib[i * c + j] = T::from_f64((p - indicator) * g);
                    }
                }
                self.accumulate_grad(logits, &contrib);
            }
        }
    }

    fn backprop_matmul(&mut self, a: TensorId, b: TensorId, out: TensorId, up: &[T]) {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let n = bsh[bsh.len() - 1];
        let out_shape = self.shape(out).to_vec();
        let batch = &out_shape[..out_shape.len() - 2];
        let offs_a = shape::batch_offsets(batch, &ash[..ash.len() - 2], m * k);
        let offs_b = shape::batch_offsets(batch, &bsh[..bsh.len() - 2], k * n);

        if self.tensors[a.0].requires_grad {
            // dA = dC · Bᵀ, accumulated across broadcast batch blocks
            let mut contrib = vec![T::zero(); self.tensors[a.0].data.len()];
            let bd = &self.tensors[b.0].data;
            for (bi, (&oa, &ob)) in offs_a.iter().zip(&offs_b).enumerate() {
                let dc = &up[bi * m * n..(bi + 1) * m * n];
                let bm = &bd[ob..ob + k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0f64;
                        for j in 0..n {
                            acc += dc[i * n + j].as_f64() * bm[p * n + j].as_f64();
                        }
                        let slot = &mut contrib[oa + i * k + p];
                        *slot = *slot + T::from_f64(acc);
                    }
                }
            }
            self.accumulate_grad(a, &contrib);
        }
        if self.tensors[b.0].requires_grad {
            // dB = Aᵀ · dC
            let mut contrib = vec![T::zero(); self.tensors[b.0].data.len()];
            let ad = &self.tensors[a.0].data;
            for (bi, (&oa, &ob)) in offs_a.iter().zip(&offs_b).enumerate() {
                let dc = &up[bi * m * n..(bi + 1) * m * n];
                let am = &ad[oa..oa + m * k];
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0f64;
                        for i in 0..m {
                            acc += am[i * k + p].as_f64() * dc[i * n + j].as_f64();
                        }
                        let slot = &mut contrib[ob + p * n + j];
                        *slot = *slot + T::from_f64(acc);
                    }
                }
            }
            self.accumulate_grad(b, &contrib);
        }
    }

    fn backprop_layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        up: &[T],
    ) {
        let d = *self.shape(x).last().unwrap();
        let xd = &self.tensors[x.0].data;
        let gd = &self.tensors[gamma.0].data;
        let rows = xd.len() / d;
        let mut dx = vec![T::zero(); xd.len()];
        let mut dgamma = vec![0.0f64; d];
        let mut dbeta = vec![0.0f64; d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let urow = &up[r * d..(r + 1) * d];
            let (mean, var) = row_mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            // dxhat = dy * gamma; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for c in 0..d {
                let xhat = (row[c].as_f64() - mean) * inv;
                let dy = urow[c].as_f64();
                let dxhat = dy * gd[c].as_f64();
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                dgamma[c] += dy * xhat;
                dbeta[c] += dy;
            }
            let m1 = sum_dxhat / d as f64;
            let m2 = sum_dxhat_xhat / d as f64;
            for c in 0..d {
                let xhat = (row[c].as_f64() - mean) * inv;
                let dxhat = urow[c].as_f64() * gd[c].as_f64();
                dx[r * d + c] = T::from_f64(inv * (dxhat - m1 - xhat * m2));
            }
        }
        self.accumulate_grad(x, &dx);
        let dgamma: Vec<T> = dgamma.into_iter().map(T::from_f64).collect();
        let dbeta: Vec<T> = dbeta.into_iter().map(T::from_f64).collect();
        self.accumulate_grad(gamma, &dgamma);
        self.accumulate_grad(beta, &dbeta);
    }
}

// ── scalar kernels ──────────────────────────────────────────────────

/// `C[m,n] = A[m,k]·B[k,n]`, accumulating each output element in f64.
fn matmul_2d<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let av = a[i * k + p].as_f64();
            let brow = &b[p * n..(p + 1) * n];
            for (j, &bv) in brow.iter().enumerate() {
                acc[j] += av * bv.as_f64();
            }
        }
        for j in 0..n {
            out[i * n + j] = T::from_f64(acc[j]);
        }
    }
}

fn transpose_copy<T: Copy + Default>(
    data: &[T],
    in_shape: &[usize],
    ax0: usize,
    ax1: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut out_shape = in_shape.to_vec();
    out_shape.swap(ax0, ax1);
    if ax0 == ax1 {
        return (data.to_vec(), out_shape);
    }
    let in_strides = strides(in_shape);
    let mut perm_strides: Vec<usize> = in_strides.clone();
    perm_strides.swap(ax0, ax1);

    let rank = out_shape.len();
    let total = numel(&out_shape);
    let mut out = vec![T::default(); total];
    let mut coords = vec![0usize; rank];
    let mut in_off = 0usize;
    for item in out.iter_mut() {
        *item = data[in_off];
        for d in (0..rank).rev() {
            coords[d] += 1;
            in_off += perm_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            in_off -= perm_strides[d] * out_shape[d];
        }
    }
    (out, out_shape)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn row_mean_var<T: Element>(row: &[T]) -> (f64, f64) {
    let d = row.len() as f64;
    let mut sum = 0.0f64;
    for v in row {
        sum += v.as_f64();
    }
    let mean = sum / d;
    let mut sq = 0.0f64;
    for v in row {
        let c = v.as_f64() - mean;
        sq += c * c;
    }
    (mean, sq / d)
}

/// logsumexp of one row with max subtraction, in f64.
fn row_lse<T: Element>(row: &[T]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for v in row {
        max = max.max(v.as_f64());
    }
    let mut acc = 0.0f64;
    for v in row {
        acc += (v.as_f64() - max).exp();
    }
    max + acc.ln()
}

const GELU_COEF: f64 = 0.044715;

fn gelu_scalar<T: Element>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(GELU_COEF);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad_scalar<T: Element>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(GELU_COEF);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests;
