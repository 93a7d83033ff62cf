//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s together with
//! the primal result. [`Tape::backward`] walks the records once in reverse
//! order and accumulates adjoints. Tapes are rebuilt for each loss
//! evaluation; the graph depends on how many jumps each path sampled.
//!
//! Activation derivatives are primitives of their own (with the second
//! derivative as their adjoint rule), so an input-gradient written out as
//! matmuls and activation derivatives stays differentiable in the weights.
//!
//! ```
//! use fbsjnn::autodiff::Tape;
//! use fbsjnn::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = tape.square(x);
//! let obj = tape.sum(sq);
//! let grads = tape.backward(obj, &[x]).unwrap();
//! assert_eq!(grads[0].data(), &[2.0, 4.0, 6.0]);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, MatRef, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

/// Pointwise nonlinearity of a hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
        }
    }

    /// First derivative. ReLU-type kinks take the left slope at exactly 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }

    #[inline]
    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Relu | Activation::LeakyRelu { .. } => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Affine { x: usize, w: usize, b: usize },
    Sum(usize),
    Mean(usize),
    Square(usize),
    Inner(usize, usize),
    RowSum(usize),
    Act(usize, Activation),
    ActDeriv(usize, Activation),
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    GatherRows { a: usize, index: Vec<usize> },
    ScatterAddRows { a: usize, index: Vec<usize> },
    RowMatVec { a: usize, mats: Vec<f64>, transposed: bool },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient can be requested from [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf that never receives a gradient (data, masks, coefficients).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value, requires_grad });
        Var { id, tape: self.id }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::ForeignVariable);
        }
        Ok(())
    }

    fn grad_flag(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        self.check(a)?;
        self.check(b)?;
        let ta = &self.nodes[a.id].value;
        let tb = &self.nodes[b.id].value;
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.is_scalar_like() {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if ta.is_scalar_like() {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::Shape { op: name, lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
        };
        Ok((value, self.grad_flag(&[a.id, b.id])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a.id, b.id), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a.id, b.id), value, rg))
    }

    /// Elementwise product (one side may be a one-element tensor).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a.id, b.id), value, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.id].value.map(|x| c * x);
        let rg = self.grad_flag(&[a.id]);
        self.push(Op::Scale(a.id, c), value, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let va = &self.nodes[a.id].value;
        let vb = &self.nodes[b.id].value;
        if va.rank() != 2 || vb.rank() != 2 || MatRef::new(va, ta).dims().1 != MatRef::new(vb, tb).dims().0 {
            return Err(Error::Shape { op: "matmul", lhs: va.shape().to_vec(), rhs: vb.shape().to_vec() });
        }
        let value = tensor::matmul(va, ta, vb, tb);
        let rg = self.grad_flag(&[a.id, b.id]);
        Ok(self.push(Op::MatMul { a: a.id, b: b.id, ta, tb }, value, rg))
    }

    /// `x * w + b` with `x: [rows, k]`, `w: [k, m]`, `b: [m]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let vx = &self.nodes[x.id].value;
        let vw = &self.nodes[w.id].value;
        let vb = &self.nodes[b.id].value;
        if vx.rank() != 2 || vw.rank() != 2 || vx.cols() != vw.rows() {
            return Err(Error::Shape { op: "affine", lhs: vx.shape().to_vec(), rhs: vw.shape().to_vec() });
        }
        if vb.numel() != vw.cols() {
            return Err(Error::Shape { op: "affine bias", lhs: vw.shape().to_vec(), rhs: vb.shape().to_vec() });
        }
        let value = tensor::affine_forward(vx, vw, vb);
        let rg = self.grad_flag(&[x.id, w.id, b.id]);
        Ok(self.push(Op::Affine { x: x.id, w: w.id, b: b.id }, value, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes[a.id].value.sum());
        let rg = self.grad_flag(&[a.id]);
        self.push(Op::Sum(a.id), value, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.id].value;
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.grad_flag(&[a.id]);
        self.push(Op::Mean(a.id), value, rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id].value.map(|x| x * x);
        let rg = self.grad_flag(&[a.id]);
        self.push(Op::Square(a.id), value, rg)
    }

    /// Full inner product `sum(a * b)` of equally shaped tensors.
    pub fn inner(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let va = &self.nodes[a.id].value;
        let vb = &self.nodes[b.id].value;
        if va.shape() != vb.shape() {
            return Err(Error::Shape { op: "inner", lhs: va.shape().to_vec(), rhs: vb.shape().to_vec() });
        }
        let value = Tensor::scalar(va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum());
        let rg = self.grad_flag(&[a.id, b.id]);
        Ok(self.push(Op::Inner(a.id, b.id), value, rg))
    }

    /// Per-row sums: `[rows, cols] -> [rows, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.id].value;
        let (rows, cols) = (t.rows(), t.cols());
        let data = t.data().chunks_exact(cols.max(1)).map(|r| r.iter().sum()).collect();
        let value = Tensor::matrix(rows, 1, data).expect("row count");
        let rg = self.grad_flag(&[a.id]);
        self.push(Op::RowSum(a.id), value, rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let value = self.nodes[a.id].value.map(|z| act.apply(z));
        let rg = self.grad_flag(&[a.id]);
        self.push(Op::Act(a.id, act), value, rg)
    }

    /// Pointwise first derivative of `act`, itself differentiable.
    pub fn activation_derivative(&mut self, a: Var, act: Activation) -> Var {
        let value = self.nodes[a.id].value.map(|z| act.derivative(z));
        let rg = self.grad_flag(&[a.id]);
        self.push(Op::ActDeriv(a.id, act), value, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.activation(a, Activation::LeakyRelu { slope })
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.id].value;
        if t.rank() != 2 || start > end || end > t.rows() {
            return Err(Error::Shape { op: "slice_rows", lhs: t.shape().to_vec(), rhs: vec![start, end] });
        }
        let cols = t.cols();
        let value = Tensor::matrix(end - start, cols, t.data()[start * cols..end * cols].to_vec())?;
        let rg = self.grad_flag(&[a.id]);
        Ok(self.push(Op::SliceRows { a: a.id, start }, value, rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.id].value;
        if t.rank() != 2 || start > end || end > t.cols() {
            return Err(Error::Shape { op: "slice_cols", lhs: t.shape().to_vec(), rhs: vec![start, end] });
        }
        let cols = t.cols();
        let width = end - start;
        let mut data = Vec::with_capacity(t.rows() * width);
        for row in t.data().chunks_exact(cols.max(1)) {
            data.extend_from_slice(&row[start..end]);
        }
        let value = Tensor::matrix(t.rows(), width, data)?;
        let rg = self.grad_flag(&[a.id]);
        Ok(self.push(Op::SliceCols { a: a.id, start }, value, rg))
    }

    /// `out[k] = a[index[k]]` row-wise.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.id].value;
        let (rows, cols) = (t.rows(), t.cols());
        if t.rank() != 2 || index.iter().any(|&i| i >= rows) {
            return Err(Error::Shape { op: "gather_rows", lhs: t.shape().to_vec(), rhs: vec![index.len()] });
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::matrix(index.len(), cols, data)?;
        let rg = self.grad_flag(&[a.id]);
        Ok(self.push(Op::GatherRows { a: a.id, index }, value, rg))
    }

    /// `out[index[k]] += a[k]` into a zero matrix with `rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, index: Vec<usize>, rows: usize) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.id].value;
        if t.rank() != 2 || t.rows() != index.len() || index.iter().any(|&i| i >= rows) {
            return Err(Error::Shape { op: "scatter_add_rows", lhs: t.shape().to_vec(), rhs: vec![index.len(), rows] });
        }
        let cols = t.cols();
        let mut data = vec![0.0; rows * cols];
        for (k, &i) in index.iter().enumerate() {
            for c in 0..cols {
                data[i * cols + c] += t.data()[k * cols + c];
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let rg = self.grad_flag(&[a.id]);
        Ok(self.push(Op::ScatterAddRows { a: a.id, index }, value, rg))
    }

    /// Row-wise matrix-vector product with constant per-row matrices:
    /// `out[r] = M_r * a[r]` (or `M_r^T * a[r]` when `transposed`), where
    /// `mats` holds one row-major `d x d` block per row of `a: [rows, d]`.
    pub fn row_matvec(&mut self, a: Var, mats: Vec<f64>, transposed: bool) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.id].value;
        let (rows, d) = (t.rows(), t.cols());
        if t.rank() != 2 || mats.len() != rows * d * d {
            return Err(Error::Shape { op: "row_matvec", lhs: t.shape().to_vec(), rhs: vec![mats.len()] });
        }
        let mut data = vec![0.0; rows * d];
        row_matvec_kernel(t.data(), &mats, d, transposed, &mut data);
        let value = Tensor::matrix(rows, d, data)?;
        let rg = self.grad_flag(&[a.id]);
        Ok(self.push(Op::RowMatVec { a: a.id, mats, transposed }, value, rg))
    }

    /// Gradients of the scalar `objective` with respect to each of `wrt`.
    ///
    /// The tape itself is left untouched, so repeated calls give identical
    /// results. Variables the objective does not depend on get zeros.
    pub fn backward(&self, objective: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        self.check(objective)?;
        for &w in wrt {
            self.check(w)?;
        }
        let obj = &self.nodes[objective.id].value;
        if obj.numel() != 1 {
            return Err(Error::NonScalarObjective(obj.shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; objective.id + 1];
        grads[objective.id] = Some(Tensor::full(obj.shape(), 1.0));

        for id in (0..=objective.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.id).and_then(|g| g.clone()) {
                Some(g) if self.nodes[w.id].requires_grad => g,
                _ => Tensor::zeros(self.nodes[w.id].value.shape()),
            })
            .collect())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let g = g.reshaped(self.nodes[id].value.shape());
        match &mut grads[id] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adjoint of a broadcasting elementwise operand: sums when the operand
    /// was a one-element tensor stretched over the output.
    fn reduce_to(&self, id: usize, g: Tensor) -> Tensor {
        let shape = self.nodes[id].value.shape();
        if self.nodes[id].value.numel() == g.numel() {
            g
        } else {
            Tensor::full(shape, g.sum())
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |i: usize| &self.nodes[i].value;
        let needs = |i: usize| self.nodes[i].requires_grad;
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(a) {
                    self.accumulate(grads, a, self.reduce_to(a, g.clone()));
                }
                if needs(b) {
                    self.accumulate(grads, b, self.reduce_to(b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    self.accumulate(grads, a, self.reduce_to(a, g.clone()));
                }
                if needs(b) {
                    self.accumulate(grads, b, self.reduce_to(b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let ga = elementwise_times(g, val(b));
                    self.accumulate(grads, a, self.reduce_to(a, ga));
                }
                if needs(b) {
                    let gb = elementwise_times(g, val(a));
                    self.accumulate(grads, b, self.reduce_to(b, gb));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g.map(|v| c * v)),
            Op::MatMul { a, b, ta, tb } => {
                if needs(a) {
                    let ga = if ta {
                        tensor::matmul(val(b), tb, g, true)
                    } else {
                        tensor::matmul(g, false, val(b), !tb)
                    };
                    self.accumulate(grads, a, ga);
                }
                if needs(b) {
                    let gb = if tb {
                        tensor::matmul(g, true, val(a), ta)
                    } else {
                        tensor::matmul(val(a), !ta, g, false)
                    };
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Affine { x, w, b } => {
                if needs(x) {
                    self.accumulate(grads, x, tensor::matmul(g, false, val(w), true));
                }
                if needs(w) {
                    self.accumulate(grads, w, tensor::matmul(val(x), true, g, false));
                }
                if needs(b) {
                    self.accumulate(grads, b, Tensor::vector(tensor::column_sums(g)));
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, a, Tensor::full(val(a).shape(), s));
            }
            Op::Mean(a) => {
                let s = g.item() / val(a).numel() as f64;
                self.accumulate(grads, a, Tensor::full(val(a).shape(), s));
            }
            Op::Square(a) => {
                let ga = zip_map(g, val(a), |gv, x| 2.0 * x * gv);
                self.accumulate(grads, a, ga);
            }
            Op::Inner(a, b) => {
                let s = g.item();
                if needs(a) {
                    self.accumulate(grads, a, val(b).map(|v| s * v));
                }
                if needs(b) {
                    self.accumulate(grads, b, val(a).map(|v| s * v));
                }
            }
            Op::RowSum(a) => {
                let t = val(a);
                let cols = t.cols();
                let mut data = Vec::with_capacity(t.numel());
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv, cols));
                }
                self.accumulate(grads, a, Tensor::new(t.shape().to_vec(), data).expect("row_sum adjoint"));
            }
            Op::Act(a, act) => {
                let ga = zip_map(g, val(a), |gv, z| gv * act.derivative(z));
                self.accumulate(grads, a, ga);
            }
            Op::ActDeriv(a, act) => {
                let ga = zip_map(g, val(a), |gv, z| gv * act.second_derivative(z));
                self.accumulate(grads, a, ga);
            }
            Op::SliceRows { a, start } => {
                let t = val(a);
                let cols = t.cols();
                let mut ga = Tensor::zeros(t.shape());
                ga.data_mut()[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, a, ga);
            }
            Op::SliceCols { a, start } => {
                let t = val(a);
                let cols = t.cols();
                let width = g.cols();
                let mut ga = Tensor::zeros(t.shape());
                for (r, grow) in g.data().chunks_exact(width.max(1)).enumerate() {
                    ga.data_mut()[r * cols + start..r * cols + start + width].copy_from_slice(grow);
                }
                self.accumulate(grads, a, ga);
            }
            Op::GatherRows { a, ref index } => {
                let t = val(a);
                let cols = t.cols();
                let mut ga = Tensor::zeros(t.shape());
                for (k, &i) in index.iter().enumerate() {
                    for c in 0..cols {
                        ga.data_mut()[i * cols + c] += g.data()[k * cols + c];
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::ScatterAddRows { a, ref index } => {
                let t = val(a);
                let cols = t.cols();
                let mut data = Vec::with_capacity(t.numel());
                for &i in index {
                    data.extend_from_slice(&g.data()[i * cols..(i + 1) * cols]);
                }
                self.accumulate(grads, a, Tensor::new(t.shape().to_vec(), data).expect("scatter adjoint"));
            }
            Op::RowMatVec { a, ref mats, transposed } => {
                let t = val(a);
                let d = t.cols();
                let mut data = vec![0.0; t.numel()];
                row_matvec_kernel(g.data(), mats, d, !transposed, &mut data);
                self.accumulate(grads, a, Tensor::new(t.shape().to_vec(), data).expect("row_matvec adjoint"));
            }
        }
    }
}

fn row_matvec_kernel(a: &[f64], mats: &[f64], d: usize, transposed: bool, out: &mut [f64]) {
    for (r, (arow, orow)) in a.chunks_exact(d.max(1)).zip(out.chunks_exact_mut(d.max(1))).enumerate() {
        let m = &mats[r * d * d..(r + 1) * d * d];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                let mij = if transposed { m[j * d + i] } else { m[i * d + j] };
                acc += mij * arow[j];
            }
            orow[i] = acc;
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(b.shape().to_vec(), data).expect("zip_map shape")
}

/// `g * other` where `other` may be a one-element tensor broadcast over `g`.
fn elementwise_times(g: &Tensor, other: &Tensor) -> Tensor {
    if other.numel() == g.numel() {
        zip_map(g, other, |x, y| x * y).reshaped(g.shape())
    } else {
        let s = other.item();
        g.map(|x| x * s)
    }
}

/// Maximum over coordinates of `|analytic - central difference| / max(1, |analytic|)`.
///
/// `f` builds a scalar expression of its input variable on a fresh tape.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y, &[x])?.remove(0);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.param(p.clone());
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.constant(vec_t(&[1., 2.]));
        let b = tape.constant(vec_t(&[3., 4.]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4., 6.]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap());
        let v = tape.constant(Tensor::matrix(2, 1, vec![-3.5, 7.25]).unwrap());
        let out = tape.matmul(eye, v).unwrap();
        assert_eq!(tape.value(out).data(), &[-3.5, 7.25]);
    }

    #[test]
    fn tanh_at_origin() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.tanh(x);
        assert_eq!(tape.value(y).item(), 0.0);
        let g = tape.backward(y, &[x]).unwrap();
        assert_eq!(g[0].item(), 1.0);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(vec_t(&[1., 2.]));
        let b = tape.constant(vec_t(&[1., 2., 3.]));
        let err = tape.add(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "add", .. }), "{err}");
        let m = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = tape.matmul(m, m).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(vec_t(&[1., 2., 3.]));
        let s = tape.square(x);
        let o = tape.sum(s);
        assert_eq!(tape.backward(o, &[x]).unwrap()[0].data(), &[2., 4., 6.]);
    }

    #[test]
    fn inner_is_bilinear() {
        let mut tape = Tape::new();
        let a = tape.param(vec_t(&[1., 0.]));
        let b = tape.param(vec_t(&[5., 7.]));
        let o = tape.inner(a, b).unwrap();
        let g = tape.backward(o, &[a, b]).unwrap();
        assert_eq!(g[0].data(), &[5., 7.]);
        assert_eq!(g[1].data(), &[1., 0.]);
    }

    #[test]
    fn non_scalar_objective_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(vec_t(&[1., 2.]));
        assert!(matches!(tape.backward(a, &[a]), Err(Error::NonScalarObjective(_))));
    }

    #[test]
    fn foreign_variable_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.param(Tensor::scalar(1.0));
        let b = t2.param(Tensor::scalar(1.0));
        assert!(matches!(t1.backward(a, &[b]), Err(Error::ForeignVariable)));
        assert!(matches!(t1.add(a, b), Err(Error::ForeignVariable)));
    }

    #[test]
    fn unreachable_variables_get_exact_zeros() {
        let mut tape = Tape::new();
        let x = tape.param(vec_t(&[1., 2.]));
        let unused = tape.param(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s, &[x, unused]).unwrap();
        assert_eq!(g[1].data(), &[0.0; 4]);
        assert_eq!(g[1].shape(), &[2, 2]);
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(3, 2, vec![0.3, -1.2, 0.7, 2.0, -0.1, 0.05]).unwrap());
        let w = tape.param(Tensor::matrix(2, 2, vec![0.5, -0.25, 1.5, 0.75]).unwrap());
        let h = tape.matmul(x, w).unwrap();
        let a = tape.tanh(h);
        let s = tape.square(a);
        let o = tape.mean(s);
        let g1 = tape.backward(o, &[x, w]).unwrap();
        let g2 = tape.backward(o, &[x, w]).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn grad_check_quadratic() {
        let d = grad_check(
            |tape, x| {
                let s = tape.square(x);
                Ok(tape.sum(s))
            },
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(d <= 1e-9, "{d}");
    }

    #[test]
    fn grad_check_leaky_relu_linear_region() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(-2.0));
        let y = tape.leaky_relu(x, 0.01);
        assert_eq!(tape.backward(y, &[x]).unwrap()[0].item(), 0.01);
        let d = grad_check(|tape, x| Ok(tape.leaky_relu(x, 0.01)), &Tensor::scalar(-2.0), 1e-5).unwrap();
        assert!(d <= 1e-9, "{d}");
    }

    #[test]
    fn grad_check_rejects_nonpositive_step() {
        assert!(grad_check(|_, x| Ok(x), &Tensor::scalar(1.0), 0.0).is_err());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        assert_eq!(Activation::LeakyRelu { slope: 0.2 }.derivative(0.0), 0.2);
    }

    #[test]
    fn structural_primitives_match_finite_differences() {
        // gather, scatter, slices, row sums and row mat-vec in one graph.
        let point = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mats: Vec<f64> = (0..4 * 9).map(|i| (i as f64 * 0.11).cos()).collect();
        let d = grad_check(
            |tape, x| {
                let m = tape.row_matvec(x, mats.clone(), true)?;
                let top = tape.slice_rows(m, 1, 4)?;
                let cols = tape.slice_cols(top, 0, 2)?;
                let g = tape.gather_rows(cols, vec![2, 0, 2])?;
                let s = tape.scatter_add_rows(g, vec![1, 1, 4], 5)?;
                let act = tape.activation_derivative(s, Activation::Tanh);
                let r = tape.row_sum(act);
                let sq = tape.square(r);
                Ok(tape.sum(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(d <= 1e-8, "{d}");
    }

    #[test]
    fn matmul_transpose_variants_match_finite_differences() {
        let vals = |n: usize, k: f64| -> Vec<f64> { (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect() };
        for ta in [false, true] {
            for tb in [false, true] {
                // op(a) is 3x2, op(b) is 2x3.
                let a = if ta { Tensor::matrix(2, 3, vals(6, 0.7)) } else { Tensor::matrix(3, 2, vals(6, 0.7)) }.unwrap();
                let b = if tb { Tensor::matrix(3, 2, vals(6, 1.3)) } else { Tensor::matrix(2, 3, vals(6, 1.3)) }.unwrap();
                let wrt_a = grad_check(
                    |tape, x| {
                        let o = tape.constant(b.clone());
                        let m = tape.matmul_t(x, ta, o, tb)?;
                        let t = tape.tanh(m);
                        Ok(tape.sum(t))
                    },
                    &a,
                    1e-5,
                )
                .unwrap();
                let wrt_b = grad_check(
                    |tape, x| {
                        let o = tape.constant(a.clone());
                        let m = tape.matmul_t(o, ta, x, tb)?;
                        let t = tape.tanh(m);
                        Ok(tape.sum(t))
                    },
                    &b,
                    1e-5,
                )
                .unwrap();
                assert!(wrt_a <= 1e-8 && wrt_b <= 1e-8, "{ta} {tb}: {wrt_a} {wrt_b}");
            }
        }
    }
}
