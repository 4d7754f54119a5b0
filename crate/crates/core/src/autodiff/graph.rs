use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::operators::LinearMap;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    MatMul(usize, usize),
    Conv2d(usize, usize),
    Upsample2x(usize),
    AvgPool2x(usize),
    Silu(usize),
    Relu(usize),
    Sin(usize),
    Cos(usize),
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    SqNorm(usize),
    L2Norm(usize),
    L1Norm(usize),
    Dot(usize, usize),
    Reshape(usize),
    BroadcastTo(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    SoftThreshold(usize, f64),
    Linear {
        x: usize,
        map: Arc<dyn LinearMap>,
        adjoint: bool,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. Node ids are assigned in creation order,
/// which is a valid topological order for the backward sweep.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
    leaf_shapes: HashMap<usize, Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; leaves not on the path to the output get zeros.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(&var.id) {
            Some(g) => g.clone(),
            None => {
                let shape = self
                    .leaf_shapes
                    .get(&var.id)
                    .cloned()
                    .unwrap_or_else(|| var.shape());
                Tensor::zeros(&shape)
            }
        }
    }
}

fn image_shape(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![0, 0, 0, 0],
        }),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn accumulate_scaled(slot: &mut Option<Vec<f64>>, g: &[f64], scale: f64) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(g) {
                *a += scale * c;
            }
        }
        None => *slot = Some(g.iter().map(|c| scale * c).collect()),
    }
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input value. Gradients are reported for leaves created
    /// with `requires_grad = true`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn tracks(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|&p| self.tracks(p));
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if !out.value.is_scalar() {
            return Err(Error::NotScalar(out.value.shape().to_vec()));
        }
        let mut result = Gradients::default();
        for (id, n) in nodes.iter().enumerate().take(output.id + 1) {
            if matches!(n.op, Op::Leaf) && n.requires_grad {
                result.leaf_shapes.insert(id, n.value.shape().to_vec());
            }
        }
        if !out.requires_grad {
            return Ok(result);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |p: usize| -> &Tensor { &nodes[p].value };
            let tracks = |p: usize| nodes[p].requires_grad;
            match &node.op {
                Op::Leaf => {
                    result
                        .grads
                        .insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Add(a, b) => {
                    if tracks(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if tracks(*b) {
                        accumulate(&mut grads[*b], g);
                    }
                }
                Op::Sub(a, b) => {
                    if tracks(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if tracks(*b) {
                        accumulate_scaled(&mut grads[*b], &g, -1.0);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    if tracks(*a) {
                        accumulate(&mut grads[*a], g.iter().zip(bv).map(|(g, b)| g * b).collect());
                    }
                    if tracks(*b) {
                        accumulate(&mut grads[*b], g.iter().zip(av).map(|(g, a)| g * a).collect());
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    if tracks(*a) {
                        accumulate(&mut grads[*a], g.iter().zip(bv).map(|(g, b)| g / b).collect());
                    }
                    if tracks(*b) {
                        accumulate(
                            &mut grads[*b],
                            g.iter()
                                .zip(av.iter().zip(bv))
                                .map(|(g, (a, b))| -g * a / (b * b))
                                .collect(),
                        );
                    }
                }
                Op::Scale(a, s) => accumulate_scaled(&mut grads[*a], &g, *s),
                Op::ScaleBy(x, s) => {
                    let sv = val(*s).item();
                    if tracks(*x) {
                        accumulate_scaled(&mut grads[*x], &g, sv);
                    }
                    if tracks(*s) {
                        let d: f64 = g.iter().zip(val(*x).data()).map(|(g, x)| g * x).sum();
                        accumulate(&mut grads[*s], vec![d]);
                    }
                }
                Op::MatMul(a, b) => {
                    let (at, bt) = (val(*a), val(*b));
                    let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                    if tracks(*a) {
                        accumulate(&mut grads[*a], kernels::matmul_nt(&g, bt.data(), m, n, k));
                    }
                    if tracks(*b) {
                        accumulate(&mut grads[*b], kernels::matmul_tn(at.data(), &g, m, k, n));
                    }
                }
                Op::Conv2d(x, w) => {
                    let (xt, wt) = (val(*x), val(*w));
                    let xs = image_shape("conv2d", xt.shape())?;
                    let ws = image_shape("conv2d", wt.shape())?;
                    let (gx, gw) = kernels::conv2d_backward(
                        xt.data(),
                        xs,
                        wt.data(),
                        ws,
                        &g,
                        tracks(*x),
                        tracks(*w),
                    );
                    if tracks(*x) {
                        accumulate(&mut grads[*x], gx);
                    }
                    if tracks(*w) {
                        accumulate(&mut grads[*w], gw);
                    }
                }
                Op::Upsample2x(x) => {
                    let xs = image_shape("upsample2x", val(*x).shape())?;
                    accumulate(&mut grads[*x], kernels::upsample2x_backward(&g, xs));
                }
                Op::AvgPool2x(x) => {
                    let xs = image_shape("avgpool2x", val(*x).shape())?;
                    accumulate(&mut grads[*x], kernels::avgpool2x_backward(&g, xs));
                }
                Op::Silu(x) => {
                    let d = g.iter().zip(val(*x).data()).map(|(g, v)| g * silu_grad(*v)).collect();
                    accumulate(&mut grads[*x], d);
                }
                Op::Relu(x) => {
                    let d = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*x], d);
                }
                Op::Sin(x) => {
                    let d = g.iter().zip(val(*x).data()).map(|(g, v)| g * v.cos()).collect();
                    accumulate(&mut grads[*x], d);
                }
                Op::Cos(x) => {
                    let d = g.iter().zip(val(*x).data()).map(|(g, v)| -g * v.sin()).collect();
                    accumulate(&mut grads[*x], d);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let xs = image_shape("group_norm", val(*x).shape())?;
                    let (gx, gg, gb) =
                        kernels::group_norm_backward(&g, xhat, rstd, xs, val(*gamma).data(), *groups);
                    if tracks(*x) {
                        accumulate(&mut grads[*x], gx);
                    }
                    if tracks(*gamma) {
                        accumulate(&mut grads[*gamma], gg);
                    }
                    if tracks(*beta) {
                        accumulate(&mut grads[*beta], gb);
                    }
                }
                Op::Sum(x) => {
                    let n = val(*x).numel();
                    accumulate(&mut grads[*x], vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = val(*x).numel();
                    accumulate(&mut grads[*x], vec![g[0] / n as f64; n]);
                }
                Op::SqNorm(x) => accumulate_scaled(&mut grads[*x], val(*x).data(), 2.0 * g[0]),
                Op::L2Norm(x) => {
                    let norm = node.value.item();
                    if norm > 0.0 {
                        accumulate_scaled(&mut grads[*x], val(*x).data(), g[0] / norm);
                    } else {
                        accumulate(&mut grads[*x], vec![0.0; val(*x).numel()]);
                    }
                }
                Op::L1Norm(x) => {
                    let d = val(*x)
                        .data()
                        .iter()
                        .map(|v| {
                            if *v > 0.0 {
                                g[0]
                            } else if *v < 0.0 {
                                -g[0]
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads[*x], d);
                }
                Op::Dot(a, b) => {
                    if tracks(*a) {
                        accumulate_scaled(&mut grads[*a], val(*b).data(), g[0]);
                    }
                    if tracks(*b) {
                        accumulate_scaled(&mut grads[*b], val(*a).data(), g[0]);
                    }
                }
                Op::Reshape(x) => accumulate(&mut grads[*x], g),
                Op::BroadcastTo(x) => {
                    let d = kernels::broadcast_reduce(&g, val(*x).shape(), node.value.shape());
                    accumulate(&mut grads[*x], d);
                }
                Op::Concat { inputs, axis } => {
                    let out_shape = node.value.shape();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total = out_shape[*axis] * inner;
                    let mut offset = 0;
                    for &p in inputs {
                        let len = val(p).shape()[*axis] * inner;
                        if tracks(p) {
                            let mut d = Vec::with_capacity(outer * len);
                            for o in 0..outer {
                                d.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                            }
                            accumulate(&mut grads[p], d);
                        }
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let in_shape = val(*x).shape();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let total = in_shape[*axis] * inner;
                    let len = node.value.shape()[*axis] * inner;
                    let mut d = vec![0.0; val(*x).numel()];
                    for o in 0..outer {
                        d[o * total + start * inner..o * total + start * inner + len]
                            .copy_from_slice(&g[o * len..(o + 1) * len]);
                    }
                    accumulate(&mut grads[*x], d);
                }
                Op::SoftThreshold(x, thr) => {
                    let d = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(g, v)| if v.abs() > *thr { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*x], d);
                }
                Op::Linear { x, map, adjoint } => {
                    let d = apply_chunked(map.as_ref(), &g, !*adjoint);
                    accumulate(&mut grads[*x], d);
                }
            }
        }
        Ok(result)
    }
}

/// Applies `map` (or its adjoint) independently to consecutive chunks.
fn apply_chunked(map: &dyn LinearMap, x: &[f64], adjoint: bool) -> Vec<f64> {
    let (inp, outp) = if adjoint {
        (map.range_len(), map.domain_len())
    } else {
        (map.domain_len(), map.range_len())
    };
    let chunks = x.len() / inp;
    let mut out = vec![0.0; chunks * outp];
    for c in 0..chunks {
        let src = &x[c * inp..(c + 1) * inp];
        let dst = &mut out[c * outp..(c + 1) * outp];
        if adjoint {
            map.adjoint(src, dst);
        } else {
            map.apply(src, dst);
        }
    }
    out
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    /// First element; the natural accessor for scalars.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.tracks(self.id)
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.graph.push(name, out, op, &[self.id, other.id])
    }

    fn unary(self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'g>> {
        let a = self.value();
        let out = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| f(*v)).collect())?;
        self.graph.push(name, out, op, &[self.id])
    }

    fn reduce(self, name: &'static str, v: f64, op: Op) -> Result<Var<'g>> {
        self.graph.push(name, Tensor::scalar(v), op, &[self.id])
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    /// Multiplication by a constant.
    pub fn scale(self, s: f64) -> Result<Var<'g>> {
        self.unary("scale", |v| s * v, Op::Scale(self.id, s))
    }

    /// Multiplication by a recorded scalar.
    pub fn scale_by(self, s: Var<'g>) -> Result<Var<'g>> {
        let sv = s.value();
        if !sv.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape(),
                rhs: sv.shape().to_vec(),
            });
        }
        let k = sv.item();
        let a = self.value();
        let out = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| k * v).collect())?;
        self.graph
            .push("scale_by", out, Op::ScaleBy(self.id, s.id), &[self.id, s.id])
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let (m, k, k2, n) = match (a.shape(), b.shape()) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            _ => (0, 1, 2, 0),
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))?;
        self.graph
            .push("matmul", out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    /// Stride-1 zero-padded convolution; `self: [B, Cin, H, W]`,
    /// `weight: [Cout, Cin, k, k]` with odd `k`.
    pub fn conv2d(self, weight: Var<'g>) -> Result<Var<'g>> {
        let (x, w) = (self.value(), weight.value());
        let xs = image_shape("conv2d", x.shape())?;
        let ws = image_shape("conv2d", w.shape())?;
        if xs[1] != ws[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let out = kernels::conv2d_forward(x.data(), xs, w.data(), ws);
        let out = Tensor::new(vec![xs[0], ws[0], xs[2], xs[3]], out)?;
        self.graph
            .push("conv2d", out, Op::Conv2d(self.id, weight.id), &[self.id, weight.id])
    }

    pub fn upsample2x(self) -> Result<Var<'g>> {
        let x = self.value();
        let xs = image_shape("upsample2x", x.shape())?;
        let out = Tensor::new(
            vec![xs[0], xs[1], 2 * xs[2], 2 * xs[3]],
            kernels::upsample2x(x.data(), xs),
        )?;
        self.graph
            .push("upsample2x", out, Op::Upsample2x(self.id), &[self.id])
    }

    pub fn avgpool2x(self) -> Result<Var<'g>> {
        let x = self.value();
        let xs = image_shape("avgpool2x", x.shape())?;
        if xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "avgpool2x",
                lhs: x.shape().to_vec(),
                rhs: vec![2, 2],
            });
        }
        let out = Tensor::new(
            vec![xs[0], xs[1], xs[2] / 2, xs[3] / 2],
            kernels::avgpool2x(x.data(), xs),
        )?;
        self.graph
            .push("avgpool2x", out, Op::AvgPool2x(self.id), &[self.id])
    }

    pub fn silu(self) -> Result<Var<'g>> {
        self.unary("silu", silu, Op::Silu(self.id))
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.unary("relu", |v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn sin(self) -> Result<Var<'g>> {
        self.unary("sin", f64::sin, Op::Sin(self.id))
    }

    pub fn cos(self) -> Result<Var<'g>> {
        self.unary("cos", f64::cos, Op::Cos(self.id))
    }

    /// Soft-thresholding `sign(v)·max(|v| − thr, 0)`.
    pub fn soft_threshold(self, thr: f64) -> Result<Var<'g>> {
        self.unary(
            "soft_threshold",
            |v| v.signum() * (v.abs() - thr).max(0.0),
            Op::SoftThreshold(self.id, thr),
        )
    }

    /// Group normalization over `[B, C, H, W]` with per-channel affine.
    pub fn group_norm(self, gamma: Var<'g>, beta: Var<'g>, groups: usize) -> Result<Var<'g>> {
        let x = self.value();
        let xs = image_shape("group_norm", x.shape())?;
        let (gm, bt) = (gamma.value(), beta.value());
        if groups == 0 || xs[1] % groups != 0 || gm.numel() != xs[1] || bt.numel() != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "group_norm",
                lhs: x.shape().to_vec(),
                rhs: gm.shape().to_vec(),
            });
        }
        let (y, xhat, rstd) =
            kernels::group_norm_forward(x.data(), xs, gm.data(), bt.data(), groups, 1e-5);
        let out = Tensor::new(x.shape().to_vec(), y)?;
        self.graph.push(
            "group_norm",
            out,
            Op::GroupNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                groups,
                xhat,
                rstd,
            },
            &[self.id, gamma.id, beta.id],
        )
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let v = self.value().data().iter().sum();
        self.reduce("sum", v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let t = self.value();
        let v = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.reduce("mean", v, Op::Mean(self.id))
    }

    pub fn sq_norm(self) -> Result<Var<'g>> {
        let v = self.value().data().iter().map(|v| v * v).sum();
        self.reduce("sq_norm", v, Op::SqNorm(self.id))
    }

    /// Euclidean norm; its gradient at the origin is defined as zero.
    pub fn l2_norm(self) -> Result<Var<'g>> {
        let v = self.value().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.reduce("l2_norm", v, Op::L2Norm(self.id))
    }

    pub fn l1_norm(self) -> Result<Var<'g>> {
        let v = self.value().data().iter().map(|v| v.abs()).sum();
        self.reduce("l1_norm", v, Op::L1Norm(self.id))
    }

    pub fn dot(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        if a.numel() != b.numel() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let v = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        self.graph
            .push("dot", Tensor::scalar(v), Op::Dot(self.id, other.id), &[self.id, other.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let t = (*self.value()).clone().reshaped(shape)?;
        self.graph.push("reshape", t, Op::Reshape(self.id), &[self.id])
    }

    /// Right-aligned broadcasting to `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let t = self.value();
        if !kernels::broadcast_compatible(t.shape(), shape) {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::new(shape.to_vec(), kernels::broadcast_to(t.data(), t.shape(), shape))?;
        self.graph
            .push("broadcast_to", out, Op::BroadcastTo(self.id), &[self.id])
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let t = self.value();
        let shape = t.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: shape.to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&t.data()[o * total + start * inner..o * total + (start + len) * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        self.graph.push(
            "slice",
            out,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    /// Applies a linear map chunk-wise over the flattened value; the output
    /// has shape `[chunks, range_len]`.
    pub fn linear_map(self, map: &Arc<dyn LinearMap>) -> Result<Var<'g>> {
        self.linear_impl(map, false)
    }

    /// Adjoint counterpart of [`Var::linear_map`]: output `[chunks, domain_len]`.
    pub fn linear_adjoint(self, map: &Arc<dyn LinearMap>) -> Result<Var<'g>> {
        self.linear_impl(map, true)
    }

    fn linear_impl(self, map: &Arc<dyn LinearMap>, adjoint: bool) -> Result<Var<'g>> {
        let t = self.value();
        let (inp, outp) = if adjoint {
            (map.range_len(), map.domain_len())
        } else {
            (map.domain_len(), map.range_len())
        };
        if t.numel() % inp != 0 {
            return Err(Error::ShapeMismatch {
                op: if adjoint { "linear_adjoint" } else { "linear_map" },
                lhs: t.shape().to_vec(),
                rhs: vec![inp],
            });
        }
        let chunks = t.numel() / inp;
        let out = Tensor::new(vec![chunks, outp], apply_chunked(map.as_ref(), t.data(), adjoint))?;
        self.graph.push(
            "linear_map",
            out,
            Op::Linear {
                x: self.id,
                map: map.clone(),
                adjoint,
            },
            &[self.id],
        )
    }
}

/// Concatenation along `axis`; all other dimensions must agree.
pub fn concat<'g>(inputs: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let graph = first.graph;
    let values: Vec<Rc<Tensor>> = inputs.iter().map(|v| v.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
    }
    let mut out_shape = base.clone();
    out_shape[axis] = 0;
    for v in &values {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: base.clone(),
                rhs: s.to_vec(),
            });
        }
        out_shape[axis] += s[axis];
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for v in &values {
            let len = v.shape()[axis] * inner;
            data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
        }
    }
    let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
    graph.push(
        "concat",
        Tensor::new(out_shape, data)?,
        Op::Concat {
            inputs: ids.clone(),
            axis,
        },
        &ids,
    )
}
