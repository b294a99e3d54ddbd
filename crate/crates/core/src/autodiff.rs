//! Reverse-mode differentiation over a recorded graph.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and backward propagation is a single reverse sweep.
//! A graph accepts one backward pass; [`Graph::reset_grads`] re-arms it.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied differentiable operation.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// One gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    Gap(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Stack(Vec<Var>),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Patchify { x: Var, patch: usize },
    SoftMargin { z: Var, y: Tensor },
    Custom { op: Arc<dyn CustomOp>, inputs: Vec<Var> },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::Matmul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Relu(x)
            | Op::SoftmaxRows(x)
            | Op::Reshape(x)
            | Op::SumAxis(x, _)
            | Op::MeanAxis(x, _)
            | Op::SumAll(x)
            | Op::Gap(x)
            | Op::Narrow { x, .. }
            | Op::Patchify { x, .. }
            | Op::SoftMargin { z: x, .. } => vec![*x],
            Op::Concat { parts, .. } | Op::Stack(parts) => parts.clone(),
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A labelled node, recorded so callers can audit which operations a
/// computation went through.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Marker {
    pub label: &'static str,
    pub var: Var,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    markers: Vec<Marker>,
}

/// Multi-label soft-margin loss in softplus form:
/// `mean_s [ y_s·softplus(−z_s) + (1−y_s)·softplus(z_s) ]`.
pub fn soft_margin_value(z: &[f64], y: &[f64]) -> f64 {
    let total: f64 = z
        .iter()
        .zip(y)
        .map(|(&z, &y)| y * softplus(-z) + (1.0 - y) * softplus(z))
        .sum();
    total / z.len() as f64
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn check_multi_hot(op: &'static str, y: &Tensor) -> Result<()> {
    if let Some(bad) = y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(op, format!("label {bad} is not 0 or 1")));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; gradients are never propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Copy of `x` cut off from the graph (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn mark(&mut self, label: &'static str, var: Var) {
        self.markers.push(Marker { label, var });
    }

    pub fn markers(&self) -> &[Marker] {
        &self.markers
    }

    pub fn has_marker(&self, label: &str) -> bool {
        self.markers.iter().any(|m| m.label == label)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).scale(k);
        self.push(v, Op::Scale(x, k))
    }

    /// `[m, n] + [n]`, bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(v, Op::AddRow(x, bias)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    /// `x·w + b` for `x[m, in]`, `w[in, out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        Ok(self.push(v, Op::Transpose(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).relu();
        self.push(v, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).softmax_rows()?;
        Ok(self.push(v, Op::SoftmaxRows(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x).sum_axis(axis)?;
        Ok(self.push(v, Op::SumAxis(x, axis)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x).mean_axis(axis)?;
        Ok(self.push(v, Op::MeanAxis(x, axis)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum_all());
        self.push(v, Op::SumAll(x))
    }

    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).gap()?;
        Ok(self.push(v, Op::Gap(x)))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(v, Op::Narrow { x, axis, start }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&values, axis)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::stack(&values)?;
        Ok(self.push(v, Op::Stack(parts.to_vec())))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let v = tensor::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let v = tensor::patchify(self.value(x), patch)?;
        Ok(self.push(v, Op::Patchify { x, patch }))
    }

    /// Multi-label soft-margin loss of logits `z[K]` against multi-hot `y[K]`.
    pub fn soft_margin(&mut self, z: Var, y: &Tensor) -> Result<Var> {
        let zv = self.value(z);
        if zv.rank() != 1 || zv.shape() != y.shape() {
            return Err(Error::shape("soft_margin", zv.shape(), y.shape()));
        }
        check_multi_hot("soft_margin", y)?;
        let loss = soft_margin_value(zv.data(), y.data());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftMargin { z, y: y.clone() },
        ))
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&p| self.value(p)).collect();
        let v = op.forward(&values)?;
        Ok(self.push(
            v,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Clear accumulated gradients so another backward pass may run.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn accumulate(&mut self, v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    /// Propagate d`loss`/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let seed_shape = self.value(loss).shape().to_vec();
        self.grads[loss.0] = Some(Tensor::ones(&seed_shape));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(up) = self.grads[idx].take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.propagate(idx, &op, &up)?;
            self.grads[idx] = Some(up);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, op: &Op, up: &Tensor) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, up.clone())?;
                self.accumulate(*b, up.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, up.clone())?;
                self.accumulate(*b, up.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let ga = up.mul(self.value(*b))?;
                let gb = up.mul(self.value(*a))?;
                self.accumulate(*a, ga)?;
                self.accumulate(*b, gb)?;
            }
            Op::Scale(x, k) => self.accumulate(*x, up.scale(*k))?,
            Op::AddRow(x, b) => {
                let gb = up.sum_axis(0)?;
                self.accumulate(*x, up.clone())?;
                self.accumulate(*b, gb)?;
            }
            Op::Matmul(a, b) => {
                let ga = up.matmul(&self.value(*b).transpose()?)?;
                let gb = self.value(*a).transpose()?.matmul(up)?;
                self.accumulate(*a, ga)?;
                self.accumulate(*b, gb)?;
            }
            Op::Transpose(x) => self.accumulate(*x, up.transpose()?)?,
            Op::Relu(x) => {
                let mut g = up.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.accumulate(*x, g)?;
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[idx].value;
                let cols = y.shape()[1];
                let mut g = up.clone();
                for (grow, yrow) in g.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.accumulate(*x, g)?;
            }
            Op::Reshape(x) => {
                let g = up.reshape(self.value(*x).shape())?;
                self.accumulate(*x, g)?;
            }
            Op::SumAxis(x, axis) => {
                let len = self.value(*x).shape()[*axis];
                self.accumulate(*x, up.broadcast_axis(*axis, len)?)?;
            }
            Op::MeanAxis(x, axis) => {
                let len = self.value(*x).shape()[*axis];
                let g = up.broadcast_axis(*axis, len)?.map(|v| v / len as f64);
                self.accumulate(*x, g)?;
            }
            Op::SumAll(x) => {
                let g = Tensor::full(self.value(*x).shape(), up.item()?);
                self.accumulate(*x, g)?;
            }
            Op::Gap(x) => {
                let shape = self.value(*x).shape().to_vec();
                let area = (shape[1] * shape[2]) as f64;
                let g = up.map(|v| v / area);
                let g = g
                    .reshape(&[shape[0], 1])?
                    .broadcast_axis(1, shape[1] * shape[2])?
                    .reshape(&shape)?;
                self.accumulate(*x, g)?;
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.value(*x).shape().to_vec();
                let mut parts = Vec::new();
                let len = up.shape()[*axis];
                if *start > 0 {
                    let mut s = shape.clone();
                    s[*axis] = *start;
                    parts.push(Tensor::zeros(&s));
                }
                parts.push(up.clone());
                let tail = shape[*axis] - start - len;
                if tail > 0 {
                    let mut s = shape.clone();
                    s[*axis] = tail;
                    parts.push(Tensor::zeros(&s));
                }
                let refs: Vec<&Tensor> = parts.iter().collect();
                self.accumulate(*x, Tensor::concat(&refs, *axis)?)?;
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    self.accumulate(p, up.narrow(*axis, start, len)?)?;
                    start += len;
                }
            }
            Op::Stack(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    self.accumulate(p, up.index(i)?)?;
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    tensor::conv2d_backward(self.value(*x), self.value(*w), up, *stride, *pad)?;
                self.accumulate(*x, dx)?;
                self.accumulate(*w, dw)?;
                self.accumulate(*b, db)?;
            }
            Op::Patchify { x, patch } => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(*x, tensor::unpatchify(up, &shape, *patch)?)?;
            }
            Op::SoftMargin { z, y } => {
                let scale = up.item()? / y.numel() as f64;
                let zv = self.value(*z);
                let g = Tensor::from_fn(zv.shape(), |i| {
                    (sigmoid(zv.data()[i]) - y.data()[i]) * scale
                });
                self.accumulate(*z, g)?;
            }
            Op::Custom { op, inputs } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&p| self.value(p)).collect();
                let grads = op.backward(&values, &self.nodes[idx].value, up)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Graph(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (&p, g) in inputs.iter().zip(grads) {
                    self.accumulate(p, g)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_backward_is_rejected_until_reset() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert!(g.backward(s).is_err());
        g.reset_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_b_transpose() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = g.param(Tensor::from_fn(&[3, 2], |i| 1.0 - i as f64 * 0.3));
        let y = g.matmul(a, b).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        let expect = Tensor::ones(&[2, 2])
            .matmul(&g.value(b).transpose().unwrap())
            .unwrap();
        assert_eq!(g.grad(a).unwrap(), &expect);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::ones(&[2]));
        let p = g.param(Tensor::ones(&[2]));
        let y = g.mul(c, p).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(p).is_some());
    }

    #[test]
    fn gap_gradient_spreads_evenly() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2, 2, 3]));
        let z = g.gap(x).unwrap();
        let s = g.sum_all(z);
        g.backward(s).unwrap();
        for v in g.grad(x).unwrap().data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_margin_rejects_non_binary_labels() {
        let mut g = Graph::new();
        let z = g.param(Tensor::zeros(&[2]));
        assert!(g.soft_margin(z, &Tensor::from_vec(vec![0.5, 1.0])).is_err());
    }
}
