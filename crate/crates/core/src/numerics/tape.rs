//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every differentiable operation in execution order.
//! [`Tape::backward`] replays the record in exact reverse order, summing the
//! contributions of every consumer into each input's gradient.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;

use super::param::{ParamKey, Parameter};
use super::tensor::{assemble_windows, gelu_grad_scalar, gelu_scalar, Scalar, Tensor};
use crate::error::{bail, Result};

/// Kinds of recorded operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulBt,
    Add,
    AddBias,
    Mul,
    Scale,
    Gelu,
    LayerNorm,
    SoftmaxRows,
    SliceCols,
    ConcatCols,
    ConcatRows,
    Transpose,
    Gather,
    Windows,
    MseLoss,
    CrossEntropy,
    Sum,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 18] = [
        OpKind::MatMul,
        OpKind::MatMulBt,
        OpKind::Add,
        OpKind::AddBias,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::SoftmaxRows,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::ConcatRows,
        OpKind::Transpose,
        OpKind::Gather,
        OpKind::Windows,
        OpKind::MseLoss,
        OpKind::CrossEntropy,
        OpKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::MatMulBt => "matmul_bt",
            OpKind::Add => "add",
            OpKind::AddBias => "add_bias",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Transpose => "transpose",
            OpKind::Gather => "gather",
            OpKind::Windows => "assemble_windows",
            OpKind::MseLoss => "mse_loss",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Sum => "sum",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        std::iter::once(OpKind::Leaf)
            .chain(Self::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    SoftmaxRows(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Transpose(usize),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Windows {
        x: usize,
        n: usize,
    },
    Mse {
        pred: usize,
        target: Tensor<T>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        ignore: Option<usize>,
        probs: Tensor<T>,
        count: usize,
    },
    Sum(usize),
}

impl<T: Scalar> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulBt(..) => OpKind::MatMulBt,
            Op::Add(..) => OpKind::Add,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Gelu(..) => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Gather { .. } => OpKind::Gather,
            Op::Windows { .. } => OpKind::Windows,
            Op::Mse { .. } => OpKind::MseLoss,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(..) => OpKind::Sum,
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamKey>,
}

/// Ordered record of executed operations.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<ParamKey, usize>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamKey, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a trainable parameter bound on the tape, if it was reached.
    pub fn param(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.params
            .get(&key)
            .and_then(|&id| self.by_node.get(id))
            .and_then(Option::as_ref)
    }

    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(var.id).and_then(Option::as_ref)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            fault: None,
        }
    }

    /// A tape whose backward pass doubles the gradient of every `kind`
    /// operation. Only used as a negative control for gradient checks.
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            fault: Some(kind),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A free input that does receive a gradient (read it with
    /// [`Gradients::wrt`]).
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter. Trainable parameters are tracked by key so their
    /// gradients can be collected after backward; repeated binds return the
    /// same node. Frozen parameters become constants.
    pub fn param(&self, p: &Parameter<T>) -> Var<'_, T> {
        if !p.trainable {
            return self.constant(p.value.clone());
        }
        if let Some(&id) = self.bound.borrow().get(&p.key()) {
            return Var { tape: self, id };
        }
        let var = self.push(p.value.clone(), Op::Leaf, true);
        self.nodes.borrow_mut()[var.id].param = Some(p.key());
        self.bound.borrow_mut().insert(p.key(), var.id);
        var
    }

    pub fn matmul<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.value_of(a.id).matmul(&self.value_of(b.id))?;
        Ok(self.push(out, Op::MatMul(a.id, b.id), self.needs(&[a.id, b.id])))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.value_of(a.id).matmul_bt(&self.value_of(b.id))?;
        Ok(self.push(out, Op::MatMulBt(a.id, b.id), self.needs(&[a.id, b.id])))
    }

    pub fn add<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = {
            let (av, bv) = (self.value_of(a.id), self.value_of(b.id));
            if av.shape() != bv.shape() {
                bail!(Dimension, "add {:?} + {:?}", av.shape(), bv.shape());
            }
            let mut out = av.clone();
            out.add_assign(&bv);
            out
        };
        Ok(self.push(out, Op::Add(a.id, b.id), self.needs(&[a.id, b.id])))
    }

    /// Adds a length-`n` bias vector to every row of an `[m × n]` matrix.
    pub fn add_bias<'t>(&'t self, a: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = {
            let (av, bv) = (self.value_of(a.id), self.value_of(bias.id));
            let n = av.cols();
            if !av.is_matrix() || bv.numel() != n {
                bail!(Dimension, "add_bias {:?} + {:?}", av.shape(), bv.shape());
            }
            let mut out = av.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (o, &b) in row.iter_mut().zip(bv.data()) {
                    *o += b;
                }
            }
            out
        };
        Ok(self.push(out, Op::AddBias(a.id, bias.id), self.needs(&[a.id, bias.id])))
    }

    /// Element-wise product.
    pub fn mul<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = {
            let (av, bv) = (self.value_of(a.id), self.value_of(b.id));
            if av.shape() != bv.shape() {
                bail!(Dimension, "mul {:?} * {:?}", av.shape(), bv.shape());
            }
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
            Tensor::new(av.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::Mul(a.id, b.id), self.needs(&[a.id, b.id])))
    }

    pub fn scale<'t>(&'t self, a: Var<'t, T>, s: T) -> Var<'t, T> {
        let out = self.value_of(a.id).map(|x| x * s);
        self.push(out, Op::Scale(a.id, s), self.needs(&[a.id]))
    }

    pub fn gelu<'t>(&'t self, a: Var<'t, T>) -> Var<'t, T> {
        let out = self.value_of(a.id).map(gelu_scalar);
        self.push(out, Op::Gelu(a.id), self.needs(&[a.id]))
    }

    /// Per-row normalisation to zero mean and unit (biased) variance, then
    /// `gain ⊙ x̂ + bias`.
    pub fn layer_norm<'t>(
        &'t self,
        x: Var<'t, T>,
        gain: Var<'t, T>,
        bias: Var<'t, T>,
        eps: f64,
    ) -> Result<Var<'t, T>> {
        if eps <= 0.0 {
            bail!(Config, "layer_norm eps must be positive");
        }
        let (out, xhat, rstd) = {
            let xv = self.value_of(x.id);
            let (gv, bv) = (self.value_of(gain.id), self.value_of(bias.id));
            let d = xv.cols();
            if !xv.is_matrix() || gv.numel() != d || bv.numel() != d {
                bail!(
                    Dimension,
                    "layer_norm x {:?} gain {:?} bias {:?}",
                    xv.shape(),
                    gv.shape(),
                    bv.shape()
                );
            }
            let dn = T::of(d as f64);
            let eps = T::of(eps);
            let mut xhat = xv.clone();
            let mut out = xv.clone();
            let mut rstd = Vec::with_capacity(xv.rows());
            for (xr, or) in xhat.data_mut().chunks_mut(d).zip(out.data_mut().chunks_mut(d)) {
                let mean = xr.iter().copied().sum::<T>() / dn;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let r = T::one() / (var + eps).sqrt();
                for ((h, o), (&g, &b)) in xr.iter_mut().zip(or.iter_mut()).zip(gv.data().iter().zip(bv.data())) {
                    *h = (*h - mean) * r;
                    *o = g * *h + b;
                }
                rstd.push(r);
            }
            (out, xhat, rstd)
        };
        let rg = self.needs(&[x.id, gain.id, bias.id]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = {
            let av = self.value_of(a.id);
            if !av.is_matrix() {
                bail!(Dimension, "softmax_rows on {:?}", av.shape());
            }
            let mut out = av.clone();
            let c = av.cols();
            for row in out.data_mut().chunks_mut(c) {
                softmax_in_place(row);
            }
            out
        };
        Ok(self.push(out, Op::SoftmaxRows(a.id), self.needs(&[a.id])))
    }

    pub fn slice_cols<'t>(&'t self, a: Var<'t, T>, start: usize, len: usize) -> Result<Var<'t, T>> {
        let out = self.value_of(a.id).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols { x: a.id, start }, self.needs(&[a.id])))
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let out = {
            let vals: Vec<Ref<'_, Tensor<T>>> = ids.iter().map(|&i| self.value_of(i)).collect();
            let refs: Vec<&Tensor<T>> = vals.iter().map(|r| &**r).collect();
            Tensor::concat_cols(&refs)?
        };
        let rg = self.needs(&ids);
        Ok(self.push(out, Op::ConcatCols(ids), rg))
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let out = {
            let vals: Vec<Ref<'_, Tensor<T>>> = ids.iter().map(|&i| self.value_of(i)).collect();
            let refs: Vec<&Tensor<T>> = vals.iter().map(|r| &**r).collect();
            Tensor::concat_rows(&refs)?
        };
        let rg = self.needs(&ids);
        Ok(self.push(out, Op::ConcatRows(ids), rg))
    }

    pub fn transpose<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.value_of(a.id).transpose()?;
        Ok(self.push(out, Op::Transpose(a.id), self.needs(&[a.id])))
    }

    /// Row lookup `table[ids[i]]`, as used by embedding tables.
    pub fn gather<'t>(&'t self, table: Var<'t, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        let out = {
            let tv = self.value_of(table.id);
            if !tv.is_matrix() {
                bail!(Dimension, "gather from {:?}", tv.shape());
            }
            let (v, d) = (tv.rows(), tv.cols());
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                if i >= v {
                    bail!(Input, "row id {i} out of range for table of {v} rows");
                }
                data.extend_from_slice(tv.row(i));
            }
            Tensor::new(vec![ids.len(), d], data)?
        };
        Ok(self.push(
            out,
            Op::Gather {
                table: table.id,
                ids: ids.to_vec(),
            },
            self.needs(&[table.id]),
        ))
    }

    /// Differentiable [`assemble_windows`].
    pub fn windows<'t>(&'t self, x: Var<'t, T>, window_n: usize) -> Result<Var<'t, T>> {
        let out = assemble_windows(&self.value_of(x.id), window_n)?;
        Ok(self.push(out, Op::Windows { x: x.id, n: window_n }, self.needs(&[x.id])))
    }

    /// Mean over all elements of `(pred - target)²`; `target` is a constant.
    pub fn mse_loss<'t>(&'t self, pred: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
        let out = {
            let pv = self.value_of(pred.id);
            if pv.shape() != target.shape() {
                bail!(Dimension, "mse_loss {:?} vs {:?}", pv.shape(), target.shape());
            }
            let n = T::of(pv.numel() as f64);
            let s: T = pv
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| (p - t) * (p - t))
                .sum();
            Tensor::scalar(s / n)
        };
        Ok(self.push(
            out,
            Op::Mse {
                pred: pred.id,
                target: target.clone(),
            },
            self.needs(&[pred.id]),
        ))
    }

    /// Mean negative log-softmax of the labelled class over rows whose label
    /// differs from `ignore`.
    pub fn cross_entropy<'t>(
        &'t self,
        logits: Var<'t, T>,
        labels: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var<'t, T>> {
        let (loss, probs, count) = {
            let lv = self.value_of(logits.id);
            if !lv.is_matrix() || lv.rows() != labels.len() {
                bail!(
                    Dimension,
                    "cross_entropy logits {:?} with {} labels",
                    lv.shape(),
                    labels.len()
                );
            }
            let k = lv.cols();
            let mut probs = lv.clone();
            let mut total = T::zero();
            let mut count = 0usize;
            for (row, &label) in probs.data_mut().chunks_mut(k).zip(labels) {
                if Some(label) == ignore {
                    row.fill(T::zero());
                    continue;
                }
                if label >= k {
                    bail!(Input, "label {label} outside [0, {k})");
                }
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
                total += lse - row[label];
                for x in row.iter_mut() {
                    *x = (*x - lse).exp();
                }
                count += 1;
            }
            if count == 0 {
                bail!(UndefinedLoss, "every position is ignored");
            }
            (total / T::of(count as f64), probs, count)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.id,
                labels: labels.to_vec(),
                ignore,
                probs,
                count,
            },
            self.needs(&[logits.id]),
        ))
    }

    pub fn sum<'t>(&'t self, a: Var<'t, T>) -> Var<'t, T> {
        let out = Tensor::scalar(self.value_of(a.id).sum());
        self.push(out, Op::Sum(a.id), self.needs(&[a.id]))
    }

    /// Propagates `∂loss/∂·` to every node that requires a gradient.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            );
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let factor = if Some(node.op.kind()) == self.fault {
                T::of(2.0)
            } else {
                T::one()
            };
            let mut send = |target: usize, mut contrib: Tensor<T>| {
                if !nodes[target].requires_grad {
                    return;
                }
                if factor != T::one() {
                    contrib.scale_in_place(factor);
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    send(*a, g.matmul_bt(val(*b))?);
                    send(*b, val(*a).matmul_at(&g)?);
                }
                Op::MatMulBt(a, b) => {
                    send(*a, g.matmul(val(*b))?);
                    send(*b, g.matmul_at(val(*a))?);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.clone());
                }
                Op::AddBias(a, b) => {
                    let n = g.cols();
                    let mut gb = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (acc, &x) in gb.iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                    send(*b, Tensor::new(val(*b).shape().to_vec(), gb)?);
                    send(*a, g.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let ga = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    let gb = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    send(*a, Tensor::new(g.shape().to_vec(), ga)?);
                    send(*b, Tensor::new(g.shape().to_vec(), gb)?);
                }
                Op::Scale(a, s) => send(*a, g.map(|x| x * *s)),
                Op::Gelu(a) => {
                    let av = val(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gi, &x)| gi * gelu_grad_scalar(x))
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = val(*gain);
                    let d = xhat.cols();
                    let dn = T::of(d as f64);
                    let mut ggain = vec![T::zero(); d];
                    let mut gbias = vec![T::zero(); d];
                    let mut gx = Tensor::zeros(xhat.shape());
                    let rows = g
                        .data()
                        .chunks(d)
                        .zip(xhat.data().chunks(d))
                        .zip(gx.data_mut().chunks_mut(d))
                        .zip(rstd);
                    for (((gr, hr), xr), &r) in rows {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            ggain[j] += gr[j] * hr[j];
                            gbias[j] += gr[j];
                            let dh = gr[j] * gv.data()[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv.data()[j];
                            xr[j] = r / dn * (dn * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    send(*gain, Tensor::new(gv.shape().to_vec(), ggain)?);
                    send(*bias, Tensor::new(val(*bias).shape().to_vec(), gbias)?);
                    send(*x, gx);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut ga = g.clone();
                    for (gr, yr) in ga.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum();
                        for (gi, &yi) in gr.iter_mut().zip(yr) {
                            *gi = yi * (*gi - dot);
                        }
                    }
                    send(*a, ga);
                }
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let (c, len) = (xv.cols(), g.cols());
                    let mut gx = Tensor::zeros(xv.shape());
                    for (i, gr) in g.data().chunks(len).enumerate() {
                        gx.data_mut()[i * c + start..i * c + start + len].copy_from_slice(gr);
                    }
                    send(*x, gx);
                }
                Op::ConcatCols(ids) => {
                    let mut start = 0;
                    for &p in ids {
                        let len = val(p).cols();
                        send(p, g.slice_cols(start, len)?);
                        start += len;
                    }
                }
                Op::ConcatRows(ids) => {
                    let c = g.cols();
                    let mut start = 0;
                    for &p in ids {
                        let rows = val(p).rows();
                        let part = g.data()[start * c..(start + rows) * c].to_vec();
                        send(p, Tensor::new(vec![rows, c], part)?);
                        start += rows;
                    }
                }
                Op::Transpose(a) => send(*a, g.transpose()?),
                Op::Gather { table, ids } => {
                    let tv = val(*table);
                    let d = tv.cols();
                    let mut gt = Tensor::zeros(tv.shape());
                    for (gr, &i) in g.data().chunks(d).zip(ids) {
                        for (acc, &x) in gt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(gr) {
                            *acc += x;
                        }
                    }
                    send(*table, gt);
                }
                Op::Windows { x, n } => {
                    let xv = val(*x);
                    let (m, d) = (xv.rows(), xv.cols());
                    let half = n / 2;
                    let width = n * d;
                    let mut gx = Tensor::zeros(xv.shape());
                    for i in 0..m {
                        for slot in 0..*n {
                            let src = i as isize + slot as isize - half as isize;
                            if src < 0 || src >= m as isize {
                                continue;
                            }
                            let src = src as usize;
                            let from = &g.data()[i * width + slot * d..i * width + (slot + 1) * d];
                            for (acc, &v) in gx.data_mut()[src * d..(src + 1) * d].iter_mut().zip(from) {
                                *acc += v;
                            }
                        }
                    }
                    send(*x, gx);
                }
                Op::Mse { pred, target } => {
                    let pv = val(*pred);
                    let scale = g.data()[0] * T::of(2.0) / T::of(pv.numel() as f64);
                    let data = pv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| (p - t) * scale)
                        .collect();
                    send(*pred, Tensor::new(pv.shape().to_vec(), data)?);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    ignore,
                    probs,
                    count,
                } => {
                    let k = probs.cols();
                    let scale = g.data()[0] / T::of(*count as f64);
                    let mut gl = probs.clone();
                    for (row, &label) in gl.data_mut().chunks_mut(k).zip(labels) {
                        if Some(label) == *ignore {
                            continue;
                        }
                        row[label] -= T::one();
                        for x in row.iter_mut() {
                            *x *= scale;
                        }
                    }
                    send(*logits, gl);
                }
                Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.data()[0])),
            }
            grads[id] = Some(g);
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|k| (k, i)))
            .collect();
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x = *x / z;
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> Result<T> {
        self.value().item()
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        self.tape.matmul(self, other)
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.tape.add(self, other)
    }

    pub fn add_bias(self, bias: Self) -> Result<Self> {
        self.tape.add_bias(self, bias)
    }

    pub fn gelu(self) -> Self {
        self.tape.gelu(self)
    }

    pub fn scale(self, s: T) -> Self {
        self.tape.scale(self, s)
    }
}

/// Standalone layer norm on a plain tensor (no tape).
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let out = tape.layer_norm(
        tape.constant(x.clone()),
        tape.constant(gain.clone()),
        tape.constant(bias.clone()),
        eps,
    )?;
    let v = out.value().clone();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn mse_examples() {
        let tape = Tape::new();
        let pred = tape.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let loss = tape.mse_loss(pred, &Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(loss.item().unwrap(), 7.5);

        let target = t(&[2, 2], &[0.5, -1.0, 2.0, 0.0]);
        let same = tape.mse_loss(tape.constant(target.clone()), &target).unwrap();
        assert_eq!(same.item().unwrap(), 0.0);
        let shifted = tape
            .mse_loss(tape.constant(target.map(|x| x + 0.5)), &target)
            .unwrap();
        assert!((shifted.item().unwrap() - 0.25).abs() < 1e-12);
        assert!(tape.mse_loss(pred, &Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::<f64>::new();
        let uniform = tape.constant(Tensor::zeros(&[1, 4]));
        let l = tape.cross_entropy(uniform, &[2], None).unwrap();
        assert!((l.item().unwrap() - 4f64.ln()).abs() < 1e-12);

        let sat = tape.constant(t(&[1, 3], &[0.0, 1000.0, 0.0]));
        assert!(tape.cross_entropy(sat, &[1], None).unwrap().item().unwrap() < 1e-12);

        let two = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let l = tape.cross_entropy(two, &[1], None).unwrap().item().unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);

        let err = tape.cross_entropy(two, &[7], Some(7));
        assert!(matches!(err, Err(crate::error::Error::UndefinedLoss(_))));
        assert!(tape.cross_entropy(two, &[5], None).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let c = layer_norm(&t(&[1, 3], &[4.0, 4.0, 4.0]), &ones, &zeros, 1e-5).unwrap();
        assert!(c.data().iter().all(|&x| x == 0.0));

        let out = layer_norm(&t(&[1, 2], &[1.0, -1.0]), &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-12).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-9 && (out.data()[1] + 1.0).abs() < 1e-9);

        let out = layer_norm(&t(&[1, 3], &[1.0, 2.0, 3.0]), &ones, &zeros, 1e-5).unwrap();
        let mean = out.data().iter().sum::<f64>() / 3.0;
        let var = out.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn backward_simple_cases() {
        let tape = Tape::<f64>::new();
        let p = tape.input(t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, 7.0]));
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(p).unwrap().data().iter().all(|&x| x == 1.0));

        let tape = Tape::<f64>::new();
        let v = tape.input(Tensor::scalar(1.5).reshape(&[1, 1]).unwrap());
        let loss = tape.mse_loss(v, &Tensor::zeros(&[1, 1])).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(v).unwrap().data()[0], 3.0);

        let nonscalar = tape.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            tape.backward(nonscalar),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn gradients_accumulate_over_multiple_uses() {
        let tape = Tape::<f64>::new();
        let x = tape.input(t(&[1, 2], &[2.0, -1.0]));
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap(); // 2x²
        let loss = tape.sum(z);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[8.0, -4.0]);
    }

    #[test]
    fn frozen_params_are_constants() {
        let mut p = Parameter::new(t(&[1, 2], &[1.0, 2.0]));
        p.trainable = false;
        let tape = Tape::<f64>::new();
        let v = tape.param(&p);
        let loss = tape.sum(v);
        let g = tape.backward(loss).unwrap();
        assert!(g.param(p.key()).is_none());
    }
}
