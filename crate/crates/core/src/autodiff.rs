//! Tape-based reverse-mode differentiation over a fixed set of tensor
//! primitives.
//!
//! A [`Tape`] records every intermediate value together with the operation
//! that produced it. [`Tape::backward`] walks the tape once in reverse and
//! returns the gradient of a scalar node with respect to every node that
//! requires one. Leaves can borrow their value, so large parameter matrices
//! are never copied onto the tape.
//!
//! Only first derivatives are supported.

use std::borrow::Cow;

use thiserror::Error;

use crate::mlp::Activation;
use crate::tensor::{gemm_into, Tensor, TensorError, Transpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("log of non-positive value {value} at node {node} (element {index})")]
    LogDomain { node: usize, index: usize, value: f64 },
    #[error("backward requires a scalar output, node {node} has shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `x * w^T` with `w` stored `[out x in]`.
    Linear(Var, Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Act(Var, Activation),
    Square(Var),
    Log(Var),
    LogSigmoid(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowNorm(Var),
    ConcatCols(Var, Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when no gradient reached
    /// it (the output did not depend on `v`).
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input owning its value.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Differentiable input borrowing its value.
    pub fn input_ref(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that borrows `value` and is differentiable iff `trainable`.
    pub fn param(&mut self, value: &'a Tensor, trainable: bool) -> Var {
        if trainable {
            self.input_ref(value)
        } else {
            self.constant_ref(value)
        }
    }

    /// `x * w^T` for `x: [r x in]`, `w: [out x in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xr, xc) = self.value(x).dims2()?;
        let (wr, wc) = self.value(w).dims2()?;
        if xc != wc {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: self.value(x).shape().to_vec(),
                right: self.value(w).shape().to_vec(),
            }
            .into());
        }
        let mut out = vec![0.0; xr * wr];
        gemm_into(
            &mut out,
            0.0,
            self.value(x).data(),
            xr,
            xc,
            Transpose::No,
            self.value(w).data(),
            wr,
            wc,
            Transpose::Yes,
        );
        let value = Tensor::new(&[xr, wr], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::Linear(x, w), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let value = self.value(x).add_row_vector(self.value(b))?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddBias(x, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let value = self.value(x).mul(&c)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MulConst(x, c), rg))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let value = self.value(x).map(|v| act.apply(v));
        let rg = self.rg(x);
        self.push(value, Op::Act(x, act), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(value, Op::Square(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        if let Some((index, &value)) = input.data().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(AutodiffError::LogDomain {
                node: x.0,
                index,
                value,
            });
        }
        let value = input.map(f64::ln);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Log(x), rg))
    }

    /// `log(sigmoid(x))`, evaluated without forming the sigmoid.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(log_sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::LogSigmoid(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// Per-row sums of a matrix, `[r x 1]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let data = (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().sum()).collect();
        let value = Tensor::new(&[r, 1], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::RowSum(x), rg))
    }

    /// Per-row Euclidean norms of a matrix, `[r x 1]`. The derivative at a
    /// zero row is taken as zero.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, _) = t.dims2()?;
        let data = t.row_norms_sq().into_iter().map(f64::sqrt).collect();
        let value = Tensor::new(&[r, 1], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::RowNorm(x), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Tensor::concat_cols(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Reverse sweep from the scalar node `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(AutodiffError::NonScalarOutput {
                node: output.0,
                shape: out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(output) {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Linear(x, w) => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (xr, xc) = xv.dims2()?;
                    let (wr, wc) = wv.dims2()?;
                    if self.rg(*x) {
                        // dX = dOut * W
                        let (slot, beta) = slot_for(&mut grads, *x, xv);
                        gemm_into(slot, beta, g.data(), xr, wr, Transpose::No, wv.data(), wr, wc, Transpose::No);
                    }
                    if self.rg(*w) {
                        // dW = dOut^T * X
                        let (slot, beta) = slot_for(&mut grads, *w, wv);
                        gemm_into(slot, beta, g.data(), xr, wr, Transpose::Yes, xv.data(), xr, xc, Transpose::No);
                    }
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (ar, ac) = av.dims2()?;
                    let (br, bc) = bv.dims2()?;
                    if self.rg(*a) {
                        let (slot, beta) = slot_for(&mut grads, *a, av);
                        gemm_into(slot, beta, g.data(), ar, bc, Transpose::No, bv.data(), br, bc, Transpose::Yes);
                    }
                    if self.rg(*b) {
                        let (slot, beta) = slot_for(&mut grads, *b, bv);
                        gemm_into(slot, beta, av.data(), ar, ac, Transpose::Yes, g.data(), ar, bc, Transpose::No);
                    }
                }
                Op::AddBias(x, b) => {
                    if self.rg(*b) {
                        let gb = g.sum_rows()?.reshape(self.value(*b).shape())?;
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.mul(self.value(*b))?);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.mul(self.value(*a))?);
                    }
                }
                Op::Scale(x, c) => accumulate(&mut grads, *x, g.scale(*c)),
                Op::MulConst(x, c) => accumulate(&mut grads, *x, g.mul(c)?),
                Op::Act(x, act) => {
                    let input = self.value(*x);
                    let output = &node.value;
                    let mut d = g.into_data();
                    for ((d, &i), &o) in d.iter_mut().zip(input.data()).zip(output.data()) {
                        *d *= act.derivative(i, o);
                    }
                    accumulate(&mut grads, *x, Tensor::new(input.shape(), d)?);
                }
                Op::Square(x) => {
                    let input = self.value(*x);
                    let d = g.zip_map(input, "square", |g, v| 2.0 * g * v)?;
                    accumulate(&mut grads, *x, d);
                }
                Op::Log(x) => {
                    let d = g.zip_map(self.value(*x), "log", |g, v| g / v)?;
                    accumulate(&mut grads, *x, d);
                }
                Op::LogSigmoid(x) => {
                    let d = g.zip_map(self.value(*x), "log_sigmoid", |g, v| g * sigmoid(-v))?;
                    accumulate(&mut grads, *x, d);
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), s));
                }
                Op::Mean(x) => {
                    let input = self.value(*x);
                    let s = g.data()[0] / input.len().max(1) as f64;
                    accumulate(&mut grads, *x, Tensor::full(input.shape(), s));
                }
                Op::RowSum(x) => {
                    let input = self.value(*x);
                    let (r, c) = input.dims2()?;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c..(i + 1) * c].fill(g.data()[i]);
                    }
                    accumulate(&mut grads, *x, Tensor::new(input.shape(), d)?);
                }
                Op::RowNorm(x) => {
                    let input = self.value(*x);
                    let (r, c) = input.dims2()?;
                    let norms = node.value.data();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        if norms[i] > 0.0 {
                            let s = g.data()[i] / norms[i];
                            for (o, &v) in d[i * c..(i + 1) * c].iter_mut().zip(input.row_slice(i)) {
                                *o = s * v;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(input.shape(), d)?);
                }
                Op::ConcatCols(a, b) => {
                    let (r, ca) = self.value(*a).dims2()?;
                    let (_, cb) = self.value(*b).dims2()?;
                    let w = ca + cb;
                    if self.rg(*a) {
                        let mut d = Vec::with_capacity(r * ca);
                        for i in 0..r {
                            d.extend_from_slice(&g.data()[i * w..i * w + ca]);
                        }
                        accumulate(&mut grads, *a, Tensor::new(self.value(*a).shape(), d)?);
                    }
                    if self.rg(*b) {
                        let mut d = Vec::with_capacity(r * cb);
                        for i in 0..r {
                            d.extend_from_slice(&g.data()[i * w + ca..(i + 1) * w]);
                        }
                        accumulate(&mut grads, *b, Tensor::new(self.value(*b).shape(), d)?);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Buffer the gradient of `v` accumulates into, with the matching `beta`
/// for `gemm_into` (0 when freshly allocated, 1 when accumulating).
fn slot_for<'g>(grads: &'g mut [Option<Tensor>], v: Var, like: &Tensor) -> (&'g mut [f64], f64) {
    let fresh = grads[v.0].is_none();
    let t = grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()));
    (t.data_mut(), if fresh { 0.0 } else { 1.0 })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    // log(sigmoid(x)) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Value and gradients of a scalar expression at the given points.
///
/// `f` builds the expression on a fresh tape from one differentiable input
/// per entry of `at`.
pub fn grad<F>(f: F, at: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let inputs: Vec<Var> = at.iter().map(|t| tape.input_ref(t)).collect();
    let out = f(&mut tape, &inputs)?;
    let value = tape.value(out).data()[0];
    let grads = tape.backward(out)?;
    let g = inputs
        .iter()
        .zip(at)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();
    Ok((value, g))
}
