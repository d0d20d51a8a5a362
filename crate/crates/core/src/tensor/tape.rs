//! Reverse-mode tape.
//!
//! Every op appends one node holding its output value and enough saved state to
//! run its backward rule. `backward` walks the nodes in exact reverse recording
//! order, so a node's inputs are always visited after it. A tape is single-threaded;
//! build a fresh one per forward pass.

use std::fmt;
use std::sync::Arc;

use super::kernels::{self, ConvDims, NormDims, PoolKind, Window3};
use super::{check_finite, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation families, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Sigmoid,
    MatMul,
    Transpose,
    Softmax,
    Conv3d,
    MaxPool3d,
    MeanPool3d,
    BatchNormTrain,
    BatchNormEval,
    Concat,
    Reshape,
    Sum,
    Bce,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n - 1) variance, the quantity tracked by running statistics.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    Conv3d {
        input: Var,
        kernel: Var,
        win: Window3,
        cols: Option<Arc<Vec<T>>>,
    },
    Pool3d {
        input: Var,
        win: Window3,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
        nd: NormDims,
        train: bool,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Sum(Var),
    Bce {
        pred: Var,
        target: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Conv3d { .. } => OpKind::Conv3d,
            Op::Pool3d {
                kind: PoolKind::Max,
                ..
            } => OpKind::MaxPool3d,
            Op::Pool3d { .. } => OpKind::MeanPool3d,
            Op::BatchNorm { train: true, .. } => OpKind::BatchNormTrain,
            Op::BatchNorm { .. } => OpKind::BatchNormEval,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
            Op::Bce { .. } => OpKind::Bce,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Sigmoid(a) | Op::Transpose(a) => vec![*a],
            Op::Reshape(a) | Op::Sum(a) => vec![*a],
            Op::Softmax { input, .. } | Op::Pool3d { input, .. } => vec![*input],
            Op::Conv3d { input, kernel, .. } => vec![*input, *kernel],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Bce { pred, .. } => vec![*pred],
        }
    }
}

pub struct Tape<T: Scalar = f32> {
    values: Vec<Arc<Tensor<T>>>,
    ops: Vec<Op<T>>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Tensor<T>>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            requires_grad: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    /// Test hook: deliberately scales every input gradient produced by ops of `kind`.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Kinds of the recorded ops, in recording order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.ops.iter().map(Op::kind).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Gradient of the last `backward` call's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", value.data())?;
        Ok(self.push_node(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push_node(&mut self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        self.grads.push(None);
        Var(self.ops.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let rg = op.inputs().iter().any(|v| self.requires_grad[v.0]);
        Ok(self.push_node(Arc::new(value), op, rg))
    }

    // ---- elementwise -------------------------------------------------------

    /// `rhs` must have the shape of `lhs` or of a trailing suffix of it; it is
    /// repeated over the leading axes.
    fn suffix_broadcast(&self, op: &'static str, lhs: Var, rhs: Var) -> Result<usize> {
        let (a, b) = (self.shape(lhs), self.shape(rhs));
        if b.len() > a.len() || a[a.len() - b.len()..] != *b {
            return Err(Error::dim(op, a, b));
        }
        Ok(self.value(rhs).numel())
    }

    fn binary(
        &mut self,
        name: &'static str,
        lhs: Var,
        rhs: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let inner = self.suffix_broadcast(name, lhs, rhs)?;
        let a = self.value(lhs);
        let b = self.value(rhs).data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b[i % inner]))
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.push(name, out, op)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary("add", lhs, rhs, |x, y| x + y, Op::Add(lhs, rhs))
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary("sub", lhs, rhs, |x, y| x - y, Op::Sub(lhs, rhs))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary("mul", lhs, rhs, |x, y| x * y, Op::Mul(lhs, rhs))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let out = self.value(input).map(|x| x * factor);
        self.push("scale", out, Op::Scale(input, factor))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|x| x.max(T::zero()));
        self.push("relu", out, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        self.push("sigmoid", out, Op::Sigmoid(input))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let plan = MatMulPlan::new(self.shape(lhs), self.shape(rhs))?;
        let (a, b) = (self.value(lhs).data(), self.value(rhs).data());
        let mut out = vec![T::zero(); plan.batch_len() * plan.m * plan.n];
        for (o, ia, ib) in plan.batches() {
            T::gemm(
                plan.m,
                plan.k,
                plan.n,
                T::one(),
                &a[ia * plan.m * plan.k..],
                (plan.k as isize, 1),
                &b[ib * plan.k * plan.n..],
                (plan.n as isize, 1),
                T::zero(),
                &mut out[o * plan.m * plan.n..],
                (plan.n as isize, 1),
            );
        }
        let out = Tensor::new(plan.out_shape(), out)?;
        self.push("matmul", out, Op::MatMul(lhs, rhs))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", x.rank())));
        }
        let out = transpose_last(x);
        self.push("transpose", out, Op::Transpose(input))
    }

    /// `x @ w + b` with `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- reductions and normalisation --------------------------------------

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let x = self.value(input);
        let (outer, len, inner) = axis_split("softmax", x.shape(), axis)?;
        let data = kernels::softmax_forward(x.data(), outer, len, inner);
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("softmax", out, Op::Softmax { input, axis })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total: T = self.value(input).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(input))
    }

    /// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != target.len() || target.is_empty() {
            return Err(Error::dim("bce", p.shape(), &[target.len()]));
        }
        let total: T = p
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &y)| {
                let p = clamp_prob(p);
                -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
            })
            .sum();
        let loss = total / T::of(target.len() as f64);
        self.push(
            "bce",
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.to_vec(),
            },
        )
    }

    fn norm_dims(&self, op: &'static str, input: Var, gamma: Var, beta: Var) -> Result<NormDims> {
        let shape = self.shape(input);
        if shape.len() < 2 {
            return Err(Error::shape(op, format!("expected [batch, channels, ..], got {shape:?}")));
        }
        let channels = shape[1];
        for p in [gamma, beta] {
            if self.shape(p) != [channels] {
                return Err(Error::dim(op, shape, self.shape(p)));
            }
        }
        Ok(NormDims {
            batch: shape[0],
            channels,
            inner: shape[2..].iter().product(),
        })
    }

    /// Batch norm with statistics of this batch. Channels are axis 1.
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let nd = self.norm_dims("batchnorm_train", input, gamma, beta)?;
        let x = self.value(input);
        let (mean, var) = kernels::channel_moments(x.data(), nd);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, x_hat) = kernels::normalize_affine(
            x.data(),
            nd,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = Tensor::new(x.shape().to_vec(), y)?;
        let m = nd.count();
        let unbiased = if m > 1 {
            T::of(m as f64 / (m - 1) as f64)
        } else {
            T::one()
        };
        let stats = BatchStats {
            mean,
            var: var.iter().map(|&v| v * unbiased).collect(),
        };
        let var_out = self.push(
            "batchnorm_train",
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                nd,
                train: true,
            },
        )?;
        Ok((var_out, stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let nd = self.norm_dims("batchnorm_eval", input, gamma, beta)?;
        if running_mean.len() != nd.channels || running_var.len() != nd.channels {
            return Err(Error::dim(
                "batchnorm_eval",
                &[nd.channels],
                &[running_mean.len(), running_var.len()],
            ));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let x = self.value(input);
        let (y, x_hat) = kernels::normalize_affine(
            x.data(),
            nd,
            running_mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = Tensor::new(x.shape().to_vec(), y)?;
        self.push(
            "batchnorm_eval",
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                nd,
                train: false,
            },
        )
    }

    // ---- volumetric --------------------------------------------------------

    /// Cross-correlation. `input` is `[c_in, d, h, w]` or `[n, c_in, d, h, w]`,
    /// `kernel` is `[c_out, c_in, kd, kh, kw]`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, win: Window3) -> Result<Var> {
        let (cd, lead) = self.conv_dims(input, kernel, &win)?;
        let (data, cols) = kernels::conv3d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            &cd,
            &win,
        );
        let cols = self.requires_grad(kernel).then(|| Arc::new(cols));
        let mut shape = lead;
        shape.push(cd.c_out);
        shape.extend_from_slice(&cd.out);
        let out = Tensor::new(shape, data)?;
        self.push("conv3d", out, Op::Conv3d { input, kernel, win, cols })
    }

    fn conv_dims(&self, input: Var, kernel: Var, win: &Window3) -> Result<(ConvDims, Vec<usize>)> {
        let xs = self.shape(input);
        let ks = self.shape(kernel);
        let (batch, lead) = match xs.len() {
            4 => (1, vec![]),
            5 => (xs[0], vec![xs[0]]),
            _ => return Err(Error::shape("conv3d", format!("input must be rank 4 or 5, got {xs:?}"))),
        };
        let c_in = xs[xs.len() - 4];
        if ks.len() != 5 || ks[1] != c_in || ks[2..] != win.kernel {
            return Err(Error::dim("conv3d", xs, ks));
        }
        let dims = [xs[xs.len() - 3], xs[xs.len() - 2], xs[xs.len() - 1]];
        let out = win.out_dims(dims).ok_or_else(|| {
            Error::shape(
                "conv3d",
                format!("kernel {:?} larger than padded input {dims:?} (padding {:?})", win.kernel, win.padding),
            )
        })?;
        Ok((
            ConvDims {
                batch,
                c_in,
                c_out: ks[0],
                dims,
                out,
            },
            lead,
        ))
    }

    /// Pools over the last three axes of a tensor of rank >= 3.
    pub fn pool3d(&mut self, input: Var, kind: PoolKind, win: Window3) -> Result<Var> {
        let name = match kind {
            PoolKind::Max => "max_pool3d",
            PoolKind::Mean => "mean_pool3d",
        };
        let x = self.value(input);
        let shape = x.shape();
        if shape.len() < 3 {
            return Err(Error::shape(name, format!("need at least 3 axes, got {shape:?}")));
        }
        if kind == PoolKind::Max && (0..3).any(|a| win.padding[a] >= win.kernel[a]) {
            return Err(Error::shape(name, "padding must be smaller than the window"));
        }
        let r = shape.len();
        let dims = [shape[r - 3], shape[r - 2], shape[r - 1]];
        let out = win.out_dims(dims).ok_or_else(|| {
            Error::shape(name, format!("window {:?} larger than padded input {dims:?}", win.kernel))
        })?;
        let planes: usize = shape[..r - 3].iter().product();
        let (data, argmax) = kernels::pool3d_forward(x.data(), planes, dims, &win, out, kind);
        let mut out_shape = shape[..r - 3].to_vec();
        out_shape.extend_from_slice(&out);
        let out = Tensor::new(out_shape, data)?;
        self.push(
            name,
            out,
            Op::Pool3d {
                input,
                win,
                kind,
                argmax,
            },
        )
    }

    // ---- structural --------------------------------------------------------

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(input))
    }

    /// Keeps axis 0, merges the rest.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let lead = shape.first().copied().unwrap_or(1);
        let rest: usize = shape.iter().skip(1).product();
        self.reshape(input, vec![lead, rest])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let x = self.value(*v);
                let chunk = x.shape()[axis] * inner;
                data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Stacks equal-shaped tensors along a new axis.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(inputs.len());
        for v in inputs {
            let mut shape = self.shape(*v).to_vec();
            if axis > shape.len() {
                return Err(Error::shape("stack", format!("axis {axis} out of range for {shape:?}")));
            }
            shape.insert(axis, 1);
            expanded.push(self.reshape(*v, shape)?);
        }
        self.concat(&expanded, axis)
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients of the scalar `loss` for every node that depends on a
    /// gradient-tracked leaf. Previous gradients are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.requires_grad[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for i in (0..=loss.0).rev() {
            if !self.requires_grad[i] || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let mut contributions = self.input_grads(i, &g)?;
            if self.fault == Some(self.ops[i].kind()) {
                for (_, t) in contributions.iter_mut() {
                    *t = t.map(|x| x * T::of(1.5) + T::of(1e-2));
                }
            }
            for (v, t) in contributions {
                if self.requires_grad[v.0] {
                    accumulate(&mut self.grads[v.0], t);
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let out = &self.values[i];
        let val = |v: Var| self.value(v);
        let rg = |v: Var| self.requires_grad[v.0];
        let mut res = Vec::new();
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(self.ops[i], Op::Sub(..));
                if rg(*a) {
                    res.push((*a, g.clone()));
                }
                if rg(*b) {
                    let mut gb = fold_suffix(g, val(*b).shape());
                    if neg {
                        gb = gb.map(|x| -x);
                    }
                    res.push((*b, gb));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let inner = vb.numel();
                if rg(*a) {
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &gj)| gj * vb.data()[j % inner])
                        .collect();
                    res.push((*a, Tensor::new(va.shape().to_vec(), d)?));
                }
                if rg(*b) {
                    let prod = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect(),
                    )?;
                    res.push((*b, fold_suffix(&prod, vb.shape())));
                }
            }
            Op::Scale(a, f) => res.push((*a, g.map(|x| x * *f))),
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gj, &x)| if x > T::zero() { gj } else { T::zero() })
                    .collect();
                res.push((*a, Tensor::new(g.shape().to_vec(), d)?));
            }
            Op::Sigmoid(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gj, &y)| gj * y * (T::one() - y))
                    .collect();
                res.push((*a, Tensor::new(g.shape().to_vec(), d)?));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let plan = MatMulPlan::new(va.shape(), vb.shape())?;
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let mut da = rg(*a).then(|| vec![T::zero(); va.numel()]);
                let mut db = rg(*b).then(|| vec![T::zero(); vb.numel()]);
                for (o, ia, ib) in plan.batches() {
                    let go = &g.data()[o * m * n..];
                    if let Some(da) = da.as_mut() {
                        // dA = dC B^T
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            go,
                            (n as isize, 1),
                            &vb.data()[ib * k * n..],
                            (1, n as isize),
                            T::one(),
                            &mut da[ia * m * k..],
                            (k as isize, 1),
                        );
                    }
                    if let Some(db) = db.as_mut() {
                        // dB = A^T dC
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &va.data()[ia * m * k..],
                            (1, k as isize),
                            go,
                            (n as isize, 1),
                            T::one(),
                            &mut db[ib * k * n..],
                            (n as isize, 1),
                        );
                    }
                }
                if let Some(da) = da {
                    res.push((*a, Tensor::new(va.shape().to_vec(), da)?));
                }
                if let Some(db) = db {
                    res.push((*b, Tensor::new(vb.shape().to_vec(), db)?));
                }
            }
            Op::Transpose(a) => res.push((*a, transpose_last(g))),
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split("softmax", out.shape(), *axis)?;
                let d = kernels::softmax_backward(out.data(), g.data(), outer, len, inner);
                res.push((*input, Tensor::new(out.shape().to_vec(), d)?));
            }
            Op::Conv3d {
                input,
                kernel,
                win,
                cols,
            } => {
                let (cd, _) = self.conv_dims(*input, *kernel, win)?;
                let (dx, dk) = kernels::conv3d_backward(
                    val(*input).data(),
                    cols.as_deref().map(|c| &c[..]),
                    val(*kernel).data(),
                    g.data(),
                    &cd,
                    win,
                    rg(*input),
                    rg(*kernel),
                );
                if let Some(dx) = dx {
                    res.push((*input, Tensor::new(val(*input).shape().to_vec(), dx)?));
                }
                if let Some(dk) = dk {
                    res.push((*kernel, Tensor::new(val(*kernel).shape().to_vec(), dk)?));
                }
            }
            Op::Pool3d {
                input,
                win,
                kind,
                argmax,
            } => {
                let x = val(*input);
                let r = x.rank();
                let dims = [x.shape()[r - 3], x.shape()[r - 2], x.shape()[r - 1]];
                let os = out.shape();
                let out_dims = [os[r - 3], os[r - 2], os[r - 1]];
                let planes = x.shape()[..r - 3].iter().product();
                let dx = kernels::pool3d_backward(
                    g.data(),
                    x.numel(),
                    planes,
                    dims,
                    win,
                    out_dims,
                    *kind,
                    argmax,
                );
                res.push((*input, Tensor::new(x.shape().to_vec(), dx)?));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                nd,
                train,
            } => {
                let gm = val(*gamma).data();
                if rg(*input) {
                    let dx = if *train {
                        kernels::batchnorm_train_backward(g.data(), x_hat, *nd, inv_std, gm).0
                    } else {
                        let scale: Vec<T> = gm.iter().zip(inv_std).map(|(&a, &b)| a * b).collect();
                        let mut dx = g.data().to_vec();
                        for (j, v) in dx.iter_mut().enumerate() {
                            *v = *v * scale[(j / nd.inner) % nd.channels];
                        }
                        dx
                    };
                    res.push((*input, Tensor::new(g.shape().to_vec(), dx)?));
                }
                if rg(*gamma) {
                    let dg = kernels::channel_sum(g.data(), *nd, Some(x_hat));
                    res.push((*gamma, Tensor::new(vec![nd.channels], dg)?));
                }
                if rg(*beta) {
                    let db = kernels::channel_sum(g.data(), *nd, None);
                    res.push((*beta, Tensor::new(vec![nd.channels], db)?));
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let xs = val(*v).shape();
                    let chunk = xs[*axis] * inner;
                    if rg(*v) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let s = o * total + offset;
                            d.extend_from_slice(&g.data()[s..s + chunk]);
                        }
                        res.push((*v, Tensor::new(xs.to_vec(), d)?));
                    }
                    offset += chunk;
                }
            }
            Op::Reshape(a) => res.push((*a, g.clone().reshape(val(*a).shape().to_vec())?)),
            Op::Sum(a) => {
                let s = g.data()[0];
                res.push((*a, Tensor::full(val(*a).shape().to_vec(), s)));
            }
            Op::Bce { pred, target } => {
                let p = val(*pred);
                let scale = g.data()[0] / T::of(target.len() as f64);
                let lo = T::of(PROB_CLAMP);
                let hi = T::one() - lo;
                let d = p
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &y)| {
                        if p < lo || p > hi {
                            T::zero()
                        } else {
                            scale * (p - y) / (p * (T::one() - p))
                        }
                    })
                    .collect();
                res.push((*pred, Tensor::new(p.shape().to_vec(), d)?));
            }
        }
        Ok(res)
    }
}

/// Distance kept between BCE predictions and 0 or 1.
pub const PROB_CLAMP: f64 = 1e-7;

pub fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::of(PROB_CLAMP);
    p.max(lo).min(T::one() - lo)
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(t),
    }
}

/// Sums `g` over the leading axes it has beyond `target` (inverse of suffix broadcast).
fn fold_suffix<T: Scalar>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    let inner: usize = target.iter().product();
    if inner == g.numel() {
        return Tensor::new(target.to_vec(), g.data().to_vec()).expect("same element count");
    }
    let mut d = vec![T::zero(); inner];
    for (j, &x) in g.data().iter().enumerate() {
        d[j % inner] = d[j % inner] + x;
    }
    Tensor::new(target.to_vec(), d).expect("suffix shape")
}

fn transpose_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let r = x.rank();
    let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
    let batch = x.numel() / (rows * cols).max(1);
    let mut data = Vec::with_capacity(x.numel());
    for bi in 0..batch {
        let m = &x.data()[bi * rows * cols..(bi + 1) * rows * cols];
        for c in 0..cols {
            for rr in 0..rows {
                data.push(m[rr * cols + c]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, data).expect("transpose keeps element count")
}

fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Batched matmul with broadcasting over the leading (batch) axes.
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
    out_batch: Vec<usize>,
}

impl MatMulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 || a[a.len() - 1] != b[b.len() - 2] {
            return Err(Error::dim("matmul", a, b));
        }
        let rank = a.len().max(b.len()) - 2;
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - (s.len() - 2)];
            v.extend_from_slice(&s[..s.len() - 2]);
            v
        };
        let (a_batch, b_batch) = (pad(a), pad(b));
        let mut out_batch = Vec::with_capacity(rank);
        for (&x, &y) in a_batch.iter().zip(&b_batch) {
            if x != y && x != 1 && y != 1 {
                return Err(Error::dim("matmul", a, b));
            }
            out_batch.push(x.max(y));
        }
        Ok(MatMulPlan {
            m: a[a.len() - 2],
            k: a[a.len() - 1],
            n: b[b.len() - 1],
            a_batch,
            b_batch,
            out_batch,
        })
    }

    fn batch_len(&self) -> usize {
        self.out_batch.iter().product()
    }

    fn out_shape(&self) -> Vec<usize> {
        let mut s = self.out_batch.clone();
        s.push(self.m);
        s.push(self.n);
        s
    }

    /// `(out_batch, a_batch, b_batch)` flat indices.
    fn batches(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.batch_len()).map(move |o| {
            let (mut rem, mut ia, mut ib, mut sa, mut sb) = (o, 0, 0, 1, 1);
            for ax in (0..self.out_batch.len()).rev() {
                let c = rem % self.out_batch[ax];
                rem /= self.out_batch[ax];
                if self.a_batch[ax] != 1 {
                    ia += c * sa;
                }
                if self.b_batch[ax] != 1 {
                    ib += c * sb;
                }
                sa *= self.a_batch[ax];
                sb *= self.b_batch[ax];
            }
            (o, ia, ib)
        })
    }
}
