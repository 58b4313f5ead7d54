//! Tape-based reverse mode.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse creation order, which is a valid topological
//! order because a node can only reference earlier nodes.

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{reduced_count, Tensor};
use crate::Float;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// The element-wise operations exposed by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Sigmoid,
    Relu,
    Tanh,
    Sqrt,
    Abs,
    Scale(Float),
    Shift(Float),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Unary(Var, Unary),
    Binary(Var, Var, Binary),
    MatMul(Var, Var),
    Sum(Var, Vec<usize>),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    Narrow { src: Var, axis: usize, start: usize },
    Gather(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every recorded node, as returned by [`Tape::gradients`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// d(loss)/d(var); zeros when `var` does not influence the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant leaf. Its gradient is available through
    /// [`Tape::gradients`] but never stored anywhere.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Records a leaf bound to a parameter; [`Tape::backward`] accumulates
    /// into that parameter's gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    fn unary(&mut self, x: Var, op: Unary) -> Var {
        let xv = self.value(x);
        let value = match op {
            Unary::Neg => xv.map(|v| -v),
            Unary::Sigmoid => xv.map(sigmoid),
            Unary::Relu => xv.map(|v| if v > 0.0 { v } else { 0.0 }),
            Unary::Tanh => xv.map(Float::tanh),
            Unary::Sqrt => xv.map(Float::sqrt),
            Unary::Abs => xv.map(Float::abs),
            Unary::Scale(c) => xv.map(|v| v * c),
            Unary::Shift(c) => xv.map(|v| v + c),
        };
        self.push(value, Op::Unary(x, op))
    }

    fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = match op {
            Binary::Add => av.add(bv)?,
            Binary::Sub => av.sub(bv)?,
            Binary::Mul => av.mul(bv)?,
            Binary::Div => av.div(bv)?,
        };
        Ok(self.push(value, Op::Binary(a, b, op)))
    }

    /// Dispatches one of the six named element-wise ops. Binary ops require
    /// `b`; unary ops ignore it.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or_else(|| TensorError::Contract(format!("{op:?} needs two operands")))
        };
        match op {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Sub => self.sub(a, need_b()?),
            ElementwiseOp::Mul => self.mul(a, need_b()?),
            ElementwiseOp::Sigmoid => Ok(self.sigmoid(a)),
            ElementwiseOp::Relu => Ok(self.relu(a)),
            ElementwiseOp::Tanh => Ok(self.tanh(a)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    /// ReLU; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    /// Square root; the derivative at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    /// Absolute value; the derivative at exactly 0 is taken as 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn scale(&mut self, x: Var, factor: Float) -> Var {
        self.unary(x, Unary::Scale(factor))
    }

    pub fn shift(&mut self, x: Var, offset: Float) -> Var {
        self.unary(x, Unary::Shift(offset))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Sum over `axes`, which are removed from the shape.
    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).sum_axes(axes)?;
        Ok(self.push(value, Op::Sum(x, axes.to_vec())))
    }

    /// Mean over `axes`, which are removed from the shape.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let count = reduced_count(self.shape(x), axes, "mean")?;
        let s = self.sum(x, axes)?;
        Ok(self.scale(s, 1.0 / count as Float))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        Ok(self.push(value, Op::Permute(x, perm.to_vec())))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).broadcast_to(shape)?;
        Ok(self.push(value, Op::BroadcastTo(x)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat(&values, axis)?;
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis)))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(value, Op::Narrow { src: x, axis, start }))
    }

    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = *self.shape(x).get(axis).ok_or(TensorError::Axis {
            op: "split",
            axis,
            rank: self.shape(x).len(),
        })?;
        if sizes.iter().sum::<usize>() != extent {
            return Err(TensorError::dim("split", self.shape(x), sizes));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Row lookup along axis 0; repeated indices accumulate on backward.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(table).gather_rows(indices)?;
        Ok(self.push(value, Op::Gather(table, indices.to_vec())))
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let grads = self.propagate(loss, None, true)?;
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Accumulates d(loss)/d(param) into every parameter reachable from
    /// `loss`. Calling it twice without zeroing adds the gradients twice.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.propagate(loss, Some(store), false).map(|_| ())
    }

    fn propagate(
        &self,
        loss: Var,
        mut store: Option<&mut ParamStore>,
        retain: bool,
    ) -> Result<Vec<Option<Tensor>>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let g = if retain {
                match &grads[i] {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    if let Some(s) = store.as_deref_mut() {
                        s.accumulate_grad(*id, &g)?;
                    }
                }
                Op::Unary(x, op) => {
                    let xv = self.value(*x);
                    let y = &node.value;
                    let gx = match *op {
                        Unary::Neg => g.map(|v| -v),
                        Unary::Sigmoid => g.zip_map(y, "sigmoid'", |g, y| g * y * (1.0 - y))?,
                        Unary::Relu => g.zip_map(xv, "relu'", |g, x| if x > 0.0 { g } else { 0.0 })?,
                        Unary::Tanh => g.zip_map(y, "tanh'", |g, y| g * (1.0 - y * y))?,
                        Unary::Sqrt => g.zip_map(y, "sqrt'", |g, y| {
                            if y > 0.0 {
                                g * 0.5 / y
                            } else {
                                0.0
                            }
                        })?,
                        Unary::Abs => g.zip_map(xv, "abs'", |g, x| {
                            if x > 0.0 {
                                g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })?,
                        Unary::Scale(c) => g.scale(c),
                        Unary::Shift(_) => g,
                    };
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Binary(a, b, op) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (ga, gb) = match op {
                        Binary::Add => (g.clone(), g),
                        Binary::Sub => (g.clone(), g.map(|v| -v)),
                        Binary::Mul => (g.mul(bv)?, g.mul(av)?),
                        Binary::Div => {
                            let ga = g.div(bv)?;
                            let gb = g.mul(&node.value)?.div(bv)?.map(|v| -v);
                            (ga, gb)
                        }
                    };
                    accumulate(&mut grads, *a, ga.sum_to_shape(av.shape())?)?;
                    accumulate(&mut grads, *b, gb.sum_to_shape(bv.shape())?)?;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (ga, gb) = matmul_adjoints(av, bv, &g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Sum(x, axes) => {
                    let xs = self.shape(*x);
                    let kept = keepdim_shape(xs, axes);
                    let gx = g.reshape(kept)?.broadcast_to(xs)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(self.shape(*x).to_vec())?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Permute(x, perm) => {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    accumulate(&mut grads, *x, g.permute(&inverse)?)?;
                }
                Op::BroadcastTo(x) => {
                    let gx = g.sum_to_shape(self.shape(*x))?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Concat(xs, axis) => {
                    let mut start = 0;
                    for &x in xs {
                        let len = self.shape(x)[*axis];
                        accumulate(&mut grads, x, g.narrow(*axis, start, len)?)?;
                        start += len;
                    }
                }
                Op::Narrow { src, axis, start } => {
                    let slot = grads[src.0]
                        .get_or_insert_with(|| Tensor::zeros(self.shape(*src).to_vec()));
                    slot.add_narrow(*axis, *start, &g);
                }
                Op::Gather(table, indices) => {
                    let slot = grads[table.0]
                        .get_or_insert_with(|| Tensor::zeros(self.shape(*table).to_vec()));
                    slot.scatter_add_rows(indices, &g);
                }
            }
        }
        Ok(grads)
    }
}

pub(crate) fn sigmoid(v: Float) -> Float {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn keepdim_shape(full: &[usize], axes: &[usize]) -> Vec<usize> {
    full.iter()
        .enumerate()
        .map(|(d, &e)| if axes.contains(&d) { 1 } else { e })
        .collect()
}

fn matmul_adjoints(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (ra, rb) = (a.rank(), b.rank());
    if rb == 2 {
        let k = a.shape()[ra - 1];
        let n = b.shape()[1];
        let ga = g.matmul(&b.transpose_last2()?)?;
        let rows = a.numel() / k.max(1);
        let a2 = a.reshape([rows, k])?;
        let g2 = g.reshape([rows, n])?;
        let gb = a2.transpose_last2()?.matmul(&g2)?;
        return Ok((ga, gb));
    }
    let ga = g.matmul(&b.transpose_last2()?)?;
    let gb = a.transpose_last2()?.matmul(g)?;
    Ok((ga.sum_to_shape(a.shape())?, gb.sum_to_shape(b.shape())?))
}
