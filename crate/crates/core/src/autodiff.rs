//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s in execution
//! order, so parents always precede children. [`Tape::grad`] walks the record
//! backwards once, visiting each node a single time.
//!
//! Non-differentiable points use fixed subgradients: `relu'(0) = 0`, and
//! `sqrt'(0) = 0` (a zero output carries no gradient). Finite-difference
//! checks must keep inputs away from those points.

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{reduce_leading, zip_broadcast, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    SliceCols(usize, usize),
    ConcatCols(usize, usize),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward computation.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input (parameter, data, or constant).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            index: nodes.len() - 1,
        }
    }

    fn owns(&self, v: &Var<'_>) -> bool {
        v.tape.id == self.id
    }

    /// Gradients of a scalar `output` with respect to each of `wrt`.
    ///
    /// Inputs that do not influence `output` receive zero gradients.
    pub fn grad(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        if !self.owns(&output) || wrt.iter().any(|v| !self.owns(v)) {
            return Err(Error::ForeignVariable);
        }
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.index].value.shape();
        if nodes[output.index].value.len() != 1 {
            return Err(Error::NonScalarOutput(out_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.index + 1];
        grads[output.index] = Some(Tensor::full(out_shape.to_vec(), 1.0));

        for i in (0..=output.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        Ok(wrt
            .iter()
            .map(|v| match grads.get(v.index).and_then(|g| g.clone()) {
                Some(g) => g,
                None => Tensor::zeros(nodes[v.index].value.shape().to_vec()),
            })
            .collect())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], index: usize, g: Tensor) {
    match &mut grads[index] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Expands a possibly broadcast operand to the output shape.
fn expand(v: &Tensor, shape: &[usize]) -> Tensor {
    if v.shape() == shape {
        return v.clone();
    }
    let inner = v.len();
    Tensor::from_fn(shape.to_vec(), |i| v.data()[i % inner])
}

/// Routes a full-shape gradient to an operand, reducing if it was broadcast.
fn route(g: Tensor, operand_shape: &[usize]) -> Tensor {
    if g.shape() == operand_shape {
        g
    } else {
        reduce_leading(&g, operand_shape)
    }
}

fn backprop(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let out = &nodes[i].value;
    match nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            accumulate(grads, a, g.matmul_nt(bv)?);
            accumulate(grads, b, av.matmul_tn(g)?);
        }
        Op::Add(a, b) => {
            accumulate(grads, a, route(g.clone(), nodes[a].value.shape()));
            accumulate(grads, b, route(g.clone(), nodes[b].value.shape()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, a, route(g.clone(), nodes[a].value.shape()));
            accumulate(grads, b, route(g.map(|x| -x), nodes[b].value.shape()));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let bx = expand(bv, g.shape());
            let ax = expand(av, g.shape());
            accumulate(grads, a, route(zip_same(g, &bx, |g, b| g * b), av.shape()));
            accumulate(grads, b, route(zip_same(g, &ax, |g, a| g * a), bv.shape()));
        }
        Op::Div(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let bx = expand(bv, g.shape());
            let ax = expand(av, g.shape());
            accumulate(grads, a, route(zip_same(g, &bx, |g, b| g / b), av.shape()));
            let gb = Tensor::from_fn(g.shape().to_vec(), |k| {
                -g.data()[k] * ax.data()[k] / (bx.data()[k] * bx.data()[k])
            });
            accumulate(grads, b, route(gb, bv.shape()));
        }
        Op::Scale(a, c) => accumulate(grads, a, g.map(|x| x * c)),
        Op::AddScalar(a) => accumulate(grads, a, g.clone()),
        Op::Square(a) => {
            accumulate(grads, a, zip_same(g, &nodes[a].value, |g, x| 2.0 * x * g));
        }
        Op::Sqrt(a) => {
            accumulate(
                grads,
                a,
                zip_same(g, out, |g, s| if s > 0.0 { g / (2.0 * s) } else { 0.0 }),
            );
        }
        Op::Exp(a) => accumulate(grads, a, zip_same(g, out, |g, e| g * e)),
        Op::Log(a) => accumulate(grads, a, zip_same(g, &nodes[a].value, |g, x| g / x)),
        Op::Relu(a) => {
            accumulate(
                grads,
                a,
                zip_same(g, &nodes[a].value, |g, x| if x > 0.0 { g } else { 0.0 }),
            );
        }
        Op::Tanh(a) => accumulate(grads, a, zip_same(g, out, |g, t| g * (1.0 - t * t))),
        Op::Sigmoid(a) => accumulate(grads, a, zip_same(g, out, |g, s| g * s * (1.0 - s))),
        Op::LogSoftmax(a) => {
            let width = *out.shape().last().unwrap_or(&1);
            let mut ga = Vec::with_capacity(g.len());
            for (g_row, o_row) in g.data().chunks(width).zip(out.data().chunks(width)) {
                let total: f64 = g_row.iter().sum();
                ga.extend(g_row.iter().zip(o_row).map(|(g, o)| g - o.exp() * total));
            }
            accumulate(grads, a, Tensor::new(out.shape().to_vec(), ga)?);
        }
        Op::Sum(a) => {
            let s = g.item();
            accumulate(grads, a, Tensor::full(nodes[a].value.shape().to_vec(), s));
        }
        Op::Mean(a) => {
            let n = nodes[a].value.len() as f64;
            let s = g.item() / n;
            accumulate(grads, a, Tensor::full(nodes[a].value.shape().to_vec(), s));
        }
        Op::SliceCols(a, start) => {
            let src = &nodes[a].value;
            let (m, n) = (src.shape()[0], src.shape()[1]);
            let w = g.shape()[1];
            let mut ga = Tensor::zeros([m, n]);
            for r in 0..m {
                ga.data_mut()[r * n + start..r * n + start + w]
                    .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            accumulate(grads, a, ga);
        }
        Op::ConcatCols(a, b) => {
            let wa = nodes[a].value.shape()[1];
            let total = g.shape()[1];
            accumulate(grads, a, g.slice_cols(0, wa)?);
            accumulate(grads, b, g.slice_cols(wa, total)?);
        }
        Op::Reshape(a) => {
            let shape = nodes[a].value.shape().to_vec();
            accumulate(grads, a, g.clone().reshape(shape)?);
        }
    }
    Ok(())
}

/// Handle to a recorded value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} on tape {})", self.index, self.tape.id)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the forward value. Drop it before recording further ops.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.index].value)
    }

    pub fn value(&self) -> Tensor {
        self.value_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value_ref().item()
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if self.tape.id == other.tape.id {
            Ok(())
        } else {
            Err(Error::ForeignVariable)
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.value_ref().map(f);
        self.tape.push(value, op)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let a = self.value_ref();
            let b = other.value_ref();
            zip_broadcast(name, &a, &b, f)?
        };
        Ok(self.tape.push(value, op(self.index, other.index)))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = self.value_ref().matmul(&other.value_ref())?;
        Ok(self.tape.push(value, Op::MatMul(self.index, other.index)))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        {
            let b = other.value_ref();
            if b.data().iter().any(|&v| v == 0.0) {
                return Err(Error::Domain {
                    op: "div",
                    detail: "division by zero".into(),
                });
            }
        }
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.index, c), |x| x * c)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.index), |x| x + c)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.index), |x| x * x)
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.value_ref().data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(Op::Sqrt(self.index), f64::sqrt))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.index), f64::exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.value_ref().data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(Op::Log(self.index), f64::ln))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.index), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.index), f64::tanh)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.index), sigmoid)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&self) -> Var<'t> {
        let value = {
            let v = self.value_ref();
            let width = *v.shape().last().unwrap_or(&1);
            let mut out = Vec::with_capacity(v.len());
            for row in v.data().chunks(width) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|x| x - lse));
            }
            Tensor::new(v.shape().to_vec(), out).expect("same shape")
        };
        self.tape.push(value, Op::LogSoftmax(self.index))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value_ref().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.index))
    }

    pub fn mean(&self) -> Var<'t> {
        let s = self.value_ref().mean();
        self.tape.push(Tensor::scalar(s), Op::Mean(self.index))
    }

    /// Columns `start..end` of a 2-D variable.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let value = self.value_ref().slice_cols(start, end)?;
        Ok(self.tape.push(value, Op::SliceCols(self.index, start)))
    }

    pub fn concat_cols(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = self.value_ref().concat_cols(&other.value_ref())?;
        Ok(self.tape.push(value, Op::ConcatCols(self.index, other.index)))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape(self.index)))
    }

    /// Same value, recorded as a fresh leaf so no gradient flows back.
    pub fn detach(&self) -> Var<'t> {
        let value = self.value();
        self.tape.leaf(value)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central-difference gradient `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` per coordinate.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step size must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective evaluated to {up} / {down} at coordinate {i}"
            )));
        }
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.sq_norm().sqrt().max(b.sq_norm().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
