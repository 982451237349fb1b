//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Backward rules
//! are themselves written with `Var` operations, so a backward pass run through
//! [`Graph::grad_graph`] leaves its own computation on the graph and the
//! returned gradients can be differentiated again. [`Graph::grad`] runs the same
//! rules with recording disabled and discards the scratch nodes afterwards.
//!
//! Nodes are appended in creation order, so node index order is a topological
//! order: every parent has a smaller index than its child.
//!
//! There is no implicit broadcasting. Binary elementwise ops require equal
//! dims; scalars are spread with [`Var::expand`].

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Scale(f32),
    AddScalar(f32),
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Sqrt,
    Recip,
    Abs,
    Sum,
    Expand(Vec<usize>),
    Reshape(Vec<usize>),
    MatMul,
    Transpose,
    Conv2d {
        stride: usize,
        pad: usize,
    },
    ConvInputGrad {
        in_h: usize,
        in_w: usize,
        stride: usize,
        pad: usize,
    },
    ConvKernelGrad {
        k: usize,
        stride: usize,
        pad: usize,
    },
    AvgPool2,
    AvgPool2Adjoint {
        h: usize,
        w: usize,
    },
    Subsample2,
    Subsample2Adjoint {
        h: usize,
        w: usize,
    },
    SumSpatial,
    ExpandChannels {
        h: usize,
        w: usize,
    },
    PadChannels {
        before: usize,
        total: usize,
    },
    SliceChannels {
        start: usize,
        len: usize,
    },
    ShiftDiff {
        axis: usize,
    },
    ShiftDiffAdjoint {
        axis: usize,
        h: usize,
        w: usize,
    },
    Softmax,
    LogSoftmax,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub parents: Vec<usize>,
    pub value: Tensor,
    pub requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: RefCell<Vec<Node>>,
    no_record: Cell<bool>,
}

/// A single-threaded tape of recorded operations.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<Inner>,
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Op::Const, vec![], value, false)
    }

    pub fn node(&self, var: &Var) -> Node {
        self.inner.nodes.borrow()[var.id].clone()
    }

    /// Node `id` in recording order, if it exists.
    pub fn node_at(&self, id: usize) -> Option<Node> {
        self.inner.nodes.borrow().get(id).cloned()
    }

    fn push(&self, op: Op, parents: Vec<usize>, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.inner.nodes.borrow_mut();
        let requires_grad = requires_grad && !self.inner.no_record.get();
        nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
        });
        Var {
            graph: self.clone(),
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor {
        self.inner.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.inner.nodes.borrow()[id].requires_grad
    }

    fn record(&self, op: Op, parents: &[&Var], value: Tensor) -> Var {
        let rg = parents.iter().any(|p| self.requires_grad(p.id));
        self.push(op, parents.iter().map(|p| p.id).collect(), value, rg)
    }

    fn var(&self, id: usize) -> Var {
        Var {
            graph: self.clone(),
            id,
        }
    }

    /// Gradients of a scalar `output` with respect to `wrt`, as plain tensors.
    /// Nothing is left on the graph.
    pub fn grad(&self, output: &Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mark = self.len();
        let prev = self.inner.no_record.replace(true);
        let result = self
            .backward(output, wrt)
            .map(|vs| vs.iter().map(Var::value).collect());
        self.inner.no_record.set(prev);
        self.inner.nodes.borrow_mut().truncate(mark);
        result
    }

    /// Gradients of a scalar `output` with respect to `wrt` whose computation is
    /// recorded on the graph, so they can be differentiated again.
    pub fn grad_graph(&self, output: &Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.backward(output, wrt)
    }

    fn backward(&self, output: &Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if !Rc::ptr_eq(&output.graph.inner, &self.inner)
            || wrt.iter().any(|w| !Rc::ptr_eq(&w.graph.inner, &self.inner))
        {
            return Err(Error::invalid(
                "grad called with vars from a different graph",
            ));
        }
        let out = output.id;
        let (parents, out_dims): (Vec<Vec<usize>>, Vec<usize>) = {
            let nodes = self.inner.nodes.borrow();
            (
                nodes[..=out].iter().map(|n| n.parents.clone()).collect(),
                nodes[out].value.dims().to_vec(),
            )
        };
        if out_dims.iter().product::<usize>() != 1 {
            return Err(Error::invalid(format!(
                "grad needs a scalar output, got dims {out_dims:?}"
            )));
        }

        let mut reachable = vec![false; out + 1];
        reachable[out] = true;
        for i in (0..=out).rev() {
            if reachable[i] {
                for &p in &parents[i] {
                    reachable[p] = true;
                }
            }
        }
        let mut needed = vec![false; out + 1];
        for w in wrt {
            if w.id > out || !reachable[w.id] {
                return Err(Error::Unreachable(w.id));
            }
            needed[w.id] = true;
        }
        {
            let nodes = self.inner.nodes.borrow();
            for i in 0..=out {
                if !needed[i] && nodes[i].requires_grad && parents[i].iter().any(|&p| needed[p]) {
                    needed[i] = true;
                }
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; out + 1];
        adj[out] = Some(self.constant(Tensor::ones(&out_dims)));
        for i in (0..=out).rev() {
            if !needed[i] || parents[i].is_empty() {
                continue;
            }
            let Some(gy) = adj[i].clone() else { continue };
            let want: Vec<bool> = parents[i].iter().map(|&p| needed[p]).collect();
            if !want.iter().any(|&w| w) {
                continue;
            }
            let contribs = self.backward_rule(i, &gy, &want)?;
            for ((&p, c), w) in parents[i].iter().zip(contribs).zip(want) {
                if !w {
                    continue;
                }
                let Some(c) = c else { continue };
                adj[p] = Some(match adj[p].take() {
                    None => c,
                    Some(prev) => prev.add(&c)?,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| {
                adj[w.id]
                    .clone()
                    .unwrap_or_else(|| self.constant(Tensor::zeros(self.value(w.id).dims())))
            })
            .collect())
    }

    /// Vector-Jacobian products of node `id` for each parent, given the
    /// output adjoint `gy`. Written with `Var` ops so the rule itself records.
    fn backward_rule(&self, id: usize, gy: &Var, want: &[bool]) -> Result<Vec<Option<Var>>> {
        let node = self.inner.nodes.borrow()[id].clone();
        let p: Vec<Var> = node.parents.iter().map(|&i| self.var(i)).collect();
        let y = self.var(id);
        let one = |v: Var| Ok(vec![Some(v)]);
        match &node.op {
            Op::Leaf | Op::Const => Ok(vec![]),
            Op::Add => Ok(vec![Some(gy.clone()), Some(gy.clone())]),
            Op::Sub => Ok(vec![Some(gy.clone()), Some(gy.scale(-1.0))]),
            Op::Mul => Ok(vec![
                if want[0] { Some(gy.mul(&p[1])?) } else { None },
                if want[1] { Some(gy.mul(&p[0])?) } else { None },
            ]),
            Op::Scale(c) => one(gy.scale(*c)),
            Op::AddScalar(_) => one(gy.clone()),
            Op::Sigmoid => one(gy.mul(&y.mul(&y.scale(-1.0).add_scalar(1.0))?)?),
            Op::Tanh => one(gy.mul(&y.mul(&y)?.scale(-1.0).add_scalar(1.0))?),
            Op::Relu => {
                // subgradient convention: relu'(0) = 0
                let mask = p[0].value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                one(gy.mul(&self.constant(mask))?)
            }
            Op::Exp => one(gy.mul(&y)?),
            Op::Log => one(gy.mul(&p[0].recip())?),
            Op::Sqrt => one(gy.mul(&y.recip())?.scale(0.5)),
            Op::Recip => one(gy.mul(&y.mul(&y)?)?.scale(-1.0)),
            Op::Abs => {
                let sign = p[0].value().map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                one(gy.mul(&self.constant(sign))?)
            }
            Op::Sum => one(gy.expand(p[0].value().dims())?),
            Op::Expand(_) => one(gy.sum()),
            Op::Reshape(_) => one(gy.reshape(p[0].value().dims())?),
            Op::MatMul => Ok(vec![
                if want[0] {
                    Some(gy.matmul(&p[1].transpose()?)?)
                } else {
                    None
                },
                if want[1] {
                    Some(p[0].transpose()?.matmul(gy)?)
                } else {
                    None
                },
            ]),
            Op::Transpose => one(gy.transpose()?),
            Op::Conv2d { stride, pad } => {
                let xd = p[0].value().dims().to_vec();
                let k = p[1].value().dims()[2];
                Ok(vec![
                    if want[0] {
                        Some(gy.conv2d_input_grad(&p[1], xd[1], xd[2], *stride, *pad)?)
                    } else {
                        None
                    },
                    if want[1] {
                        Some(p[0].conv2d_kernel_grad(gy, k, *stride, *pad)?)
                    } else {
                        None
                    },
                ])
            }
            Op::ConvInputGrad { stride, pad, .. } => {
                // parents: (grad_out, kernels); gy has the input shape
                let k = p[1].value().dims()[2];
                Ok(vec![
                    if want[0] {
                        Some(gy.conv2d(&p[1], *stride, *pad)?)
                    } else {
                        None
                    },
                    if want[1] {
                        Some(gy.conv2d_kernel_grad(&p[0], k, *stride, *pad)?)
                    } else {
                        None
                    },
                ])
            }
            Op::ConvKernelGrad { stride, pad, .. } => {
                // parents: (input, grad_out); gy has the kernel shape
                let xd = p[0].value().dims().to_vec();
                Ok(vec![
                    if want[0] {
                        Some(p[1].conv2d_input_grad(gy, xd[1], xd[2], *stride, *pad)?)
                    } else {
                        None
                    },
                    if want[1] {
                        Some(p[0].conv2d(gy, *stride, *pad)?)
                    } else {
                        None
                    },
                ])
            }
            Op::AvgPool2 => {
                let d = p[0].value().dims().to_vec();
                one(gy.avg_pool2_adjoint(d[1], d[2])?)
            }
            Op::AvgPool2Adjoint { .. } => one(gy.avg_pool2()?),
            Op::Subsample2 => {
                let d = p[0].value().dims().to_vec();
                one(gy.subsample2_adjoint(d[1], d[2])?)
            }
            Op::Subsample2Adjoint { .. } => one(gy.subsample2()?),
            Op::SumSpatial => {
                let d = p[0].value().dims().to_vec();
                one(gy.expand_channels(d[1], d[2])?)
            }
            Op::ExpandChannels { .. } => one(gy.sum_spatial()?),
            Op::PadChannels { before, .. } => {
                let c = p[0].value().dims()[0];
                one(gy.slice_channels(*before, c)?)
            }
            Op::SliceChannels { start, .. } => {
                let c = p[0].value().dims()[0];
                one(gy.pad_channels(*start, c)?)
            }
            Op::ShiftDiff { axis } => {
                let d = p[0].value().dims().to_vec();
                one(gy.shift_diff_adjoint(*axis, d[1], d[2])?)
            }
            Op::ShiftDiffAdjoint { axis, .. } => one(gy.shift_diff(*axis)?),
            Op::Softmax => {
                // s ⊙ (gy − <gy, s>)
                let d = y.value().dims().to_vec();
                let inner = gy.mul(&y)?.sum().expand(&d)?;
                one(y.mul(&gy.sub(&inner)?)?)
            }
            Op::LogSoftmax => {
                // gy − softmax(z) · Σ gy
                let d = y.value().dims().to_vec();
                let total = gy.sum().expand(&d)?;
                one(gy.sub(&p[0].softmax().mul(&total)?)?)
            }
        }
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(self.id)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.graph.inner.nodes.borrow()[self.id]
            .value
            .dims()
            .to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    fn same_graph(&self, other: &Var) -> Result<()> {
        if Rc::ptr_eq(&self.graph.inner, &other.graph.inner) {
            Ok(())
        } else {
            Err(Error::invalid("operands belong to different graphs"))
        }
    }

    fn binary(
        &self,
        other: &Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Var> {
        self.same_graph(other)?;
        let v = self.value().zip_map(&other.value(), name, f)?;
        Ok(self.graph.record(op, &[self, other], v))
    }

    fn unary(&self, op: Op, value: Tensor) -> Var {
        self.graph.record(op, &[self], value)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f32) -> Var {
        self.unary(Op::Scale(c), self.value().map(|v| v * c))
    }

    pub fn add_scalar(&self, c: f32) -> Var {
        self.unary(Op::AddScalar(c), self.value().map(|v| v + c))
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(
            Op::Sigmoid,
            self.value()
                .map(|v| (1.0 / (1.0 + (-(v as f64)).exp())) as f32),
        )
    }

    pub fn tanh(&self) -> Var {
        self.unary(Op::Tanh, self.value().map(f32::tanh))
    }

    pub fn relu(&self) -> Var {
        self.unary(Op::Relu, self.value().map(|v| v.max(0.0)))
    }

    pub fn exp(&self) -> Var {
        self.unary(Op::Exp, self.value().map(f32::exp))
    }

    pub fn ln(&self) -> Var {
        self.unary(Op::Log, self.value().map(f32::ln))
    }

    pub fn sqrt(&self) -> Var {
        self.unary(Op::Sqrt, self.value().map(f32::sqrt))
    }

    pub fn recip(&self) -> Var {
        self.unary(Op::Recip, self.value().map(|v| 1.0 / v))
    }

    pub fn abs(&self) -> Var {
        self.unary(Op::Abs, self.value().map(f32::abs))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&self) -> Var {
        let s = self.value().sum() as f32;
        self.unary(Op::Sum, Tensor::scalar(s))
    }

    /// Spreads a one-element tensor to `dims`.
    pub fn expand(&self, dims: &[usize]) -> Result<Var> {
        let v = self.value();
        if v.len() != 1 {
            return Err(Error::shape("expand", v.dims(), dims));
        }
        Ok(self.unary(Op::Expand(dims.to_vec()), Tensor::full(dims, v.item())))
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Var> {
        let v = self.value().reshape(dims)?;
        Ok(self.unary(Op::Reshape(dims.to_vec()), v))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.same_graph(other)?;
        let v = tensor::matmul(&self.value(), &other.value())?;
        Ok(self.graph.record(Op::MatMul, &[self, other], v))
    }

    pub fn transpose(&self) -> Result<Var> {
        let v = tensor::transpose(&self.value())?;
        Ok(self.unary(Op::Transpose, v))
    }

    pub fn conv2d(&self, kernels: &Var, stride: usize, pad: usize) -> Result<Var> {
        self.same_graph(kernels)?;
        let v = tensor::conv2d(&self.value(), &kernels.value(), stride, pad)?;
        Ok(self
            .graph
            .record(Op::Conv2d { stride, pad }, &[self, kernels], v))
    }

    /// `self` is an output-shaped adjoint; returns the input-shaped adjoint.
    pub fn conv2d_input_grad(
        &self,
        kernels: &Var,
        in_h: usize,
        in_w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.same_graph(kernels)?;
        let kd = kernels.dims();
        let g = ConvGeom {
            c_in: kd[1],
            c_out: kd[0],
            in_h,
            in_w,
            k: kd[2],
            stride,
            pad,
        };
        let gy = self.value();
        if gy.dims() != [g.c_out, g.out_h(), g.out_w()] {
            return Err(Error::shape("conv2d_input_grad", gy.dims(), &kd));
        }
        let v = tensor::conv2d_input_grad_raw(&g, gy.data(), kernels.value().data());
        Ok(self.graph.record(
            Op::ConvInputGrad {
                in_h,
                in_w,
                stride,
                pad,
            },
            &[self, kernels],
            v,
        ))
    }

    /// `self` is the conv input; `grad_out` is an output-shaped adjoint.
    pub fn conv2d_kernel_grad(
        &self,
        grad_out: &Var,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.same_graph(grad_out)?;
        let v = tensor::conv2d_kernel_grad(&self.value(), &grad_out.value(), k, stride, pad)?;
        Ok(self
            .graph
            .record(Op::ConvKernelGrad { k, stride, pad }, &[self, grad_out], v))
    }

    pub fn avg_pool2(&self) -> Result<Var> {
        let v = tensor::avg_pool2(&self.value())?;
        Ok(self.unary(Op::AvgPool2, v))
    }

    pub fn avg_pool2_adjoint(&self, h: usize, w: usize) -> Result<Var> {
        let v = tensor::avg_pool2_adjoint(&self.value(), h, w)?;
        Ok(self.unary(Op::AvgPool2Adjoint { h, w }, v))
    }

    pub fn subsample2(&self) -> Result<Var> {
        let v = tensor::subsample2(&self.value())?;
        Ok(self.unary(Op::Subsample2, v))
    }

    pub fn subsample2_adjoint(&self, h: usize, w: usize) -> Result<Var> {
        let v = tensor::subsample2_adjoint(&self.value(), h, w)?;
        Ok(self.unary(Op::Subsample2Adjoint { h, w }, v))
    }

    pub fn sum_spatial(&self) -> Result<Var> {
        let v = tensor::sum_spatial(&self.value())?;
        Ok(self.unary(Op::SumSpatial, v))
    }

    pub fn expand_channels(&self, h: usize, w: usize) -> Result<Var> {
        let v = tensor::expand_channels(&self.value(), h, w)?;
        Ok(self.unary(Op::ExpandChannels { h, w }, v))
    }

    pub fn pad_channels(&self, before: usize, total: usize) -> Result<Var> {
        let v = tensor::pad_channels(&self.value(), before, total)?;
        Ok(self.unary(Op::PadChannels { before, total }, v))
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Var> {
        let v = tensor::slice_channels(&self.value(), start, len)?;
        Ok(self.unary(Op::SliceChannels { start, len }, v))
    }

    pub fn shift_diff(&self, axis: usize) -> Result<Var> {
        let v = tensor::shift_diff(&self.value(), axis)?;
        Ok(self.unary(Op::ShiftDiff { axis }, v))
    }

    pub fn shift_diff_adjoint(&self, axis: usize, h: usize, w: usize) -> Result<Var> {
        let v = tensor::shift_diff_adjoint(&self.value(), axis, h, w)?;
        Ok(self.unary(Op::ShiftDiffAdjoint { axis, h, w }, v))
    }

    pub fn softmax(&self) -> Var {
        self.unary(Op::Softmax, tensor::softmax(&self.value()))
    }

    pub fn log_softmax(&self) -> Var {
        self.unary(Op::LogSoftmax, tensor::log_softmax(&self.value()))
    }

    /// Sum of squares, `Σ x²`.
    pub fn sum_sq(&self) -> Result<Var> {
        Ok(self.mul(self)?.sum())
    }

    /// Multiplies every entry by the one-element tensor `s`.
    pub fn scale_by(&self, s: &Var) -> Result<Var> {
        self.mul(&s.expand(&self.dims())?)
    }
}

/// `-Σ target · log softmax(logits)`.
///
/// `target` must be a probability vector (nonnegative, summing to 1 within
/// 1e-6); it may itself require gradients.
pub fn softmax_cross_entropy(logits: &Var, target: &Var) -> Result<Var> {
    let t = target.value();
    if logits.dims() != t.dims() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            &logits.dims(),
            t.dims(),
        ));
    }
    let total = t.sum();
    if t.data().iter().any(|&v| v < 0.0 || !v.is_finite()) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "cross-entropy target must be a probability vector (sum {total})"
        )));
    }
    Ok(target.mul(&logits.log_softmax())?.sum().scale(-1.0))
}
