//! The FBSJNN loss.
//!
//! On a batch of simulated forward paths the network supplies
//! `Y_n = N(t_n, X_n)`, `Z_n = sigma^T grad_x N` and the non-local term
//!
//! `I_n = (1/dt) sum_i [N(t_n, X_n + beta(e_i)) - N(t_n, X_n)] - <grad_x N, c(t_n, X_n)>`
//!
//! where the compensator integral is exchanged with the inner product and
//! taken in closed form. The loss averages, over the `N + 1` nodes, the mean
//! squared mismatch between `Y_{n+1}` and the one-step backward map
//! `T = Y_n - f dt + <Z_n, dW_n> + I_n dt`, plus the terminal mismatch.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::jumpsim::PathBatch;
use crate::nn::{network_input, MlpParams, MlpVars};
use crate::problems::{DriverArgs, ProblemSpec};
use crate::tensor::Tensor;

/// Anything that can stand in for `u(t, x)` inside the loss.
pub trait SolutionModel {
    fn state_dim(&self) -> usize;

    /// `[rows, 1]`
    fn value(&self, tape: &mut Tape, t: &[f64], x: &Tensor) -> Result<Var>;

    /// `([rows, 1], [rows, d])`
    fn value_and_grad(&self, tape: &mut Tape, t: &[f64], x: &Tensor) -> Result<(Var, Var)>;
}

impl SolutionModel for MlpVars {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn value(&self, tape: &mut Tape, t: &[f64], x: &Tensor) -> Result<Var> {
        let input = tape.constant(network_input(t, x, self.state_dim)?);
        self.forward_input(tape, input)
    }

    fn value_and_grad(&self, tape: &mut Tape, t: &[f64], x: &Tensor) -> Result<(Var, Var)> {
        self.forward_with_input_grad(tape, t, x)
    }
}

/// A closed-form function and its spatial gradient, recorded as constants.
pub struct OracleModel<U, G> {
    pub dim: usize,
    pub value: U,
    pub grad: G,
}

impl<U, G> SolutionModel for OracleModel<U, G>
where
    U: Fn(f64, &[f64]) -> f64,
    G: Fn(f64, &[f64], &mut [f64]),
{
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn value(&self, tape: &mut Tape, t: &[f64], x: &Tensor) -> Result<Var> {
        let v = t.iter().zip(x.data().chunks_exact(self.dim)).map(|(&ti, xi)| (self.value)(ti, xi)).collect();
        Ok(tape.constant(Tensor::matrix(t.len(), 1, v)?))
    }

    fn value_and_grad(&self, tape: &mut Tape, t: &[f64], x: &Tensor) -> Result<(Var, Var)> {
        let value = self.value(tape, t, x)?;
        let mut g = vec![0.0; t.len() * self.dim];
        for ((&ti, xi), gi) in t.iter().zip(x.data().chunks_exact(self.dim)).zip(g.chunks_exact_mut(self.dim)) {
            (self.grad)(ti, xi, gi);
        }
        let grad = tape.constant(Tensor::matrix(t.len(), self.dim, g)?);
        Ok((value, grad))
    }
}

/// Per-term loss values as plain numbers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// `E|Y_{n+1} - T(...)|^2` for `n = 0..N`.
    pub intervals: Vec<f64>,
    /// `E|Y_N - g(X_N)|^2`
    pub terminal: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| format!("{self:?}"))
    }
}

/// Tape variables of every scheme quantity on the node-major rows of a batch
/// (row `n * B + p`). `values` covers nodes `0..=N`; the rest cover `0..N`.
#[derive(Debug, Clone)]
pub struct SchemeEvaluation {
    pub values: Var,
    pub grad_x: Var,
    pub diffusion_terms: Var,
    pub integral_terms: Var,
}

/// Jump events of a batch: each event's row index and mark.
#[derive(Debug, Clone, Default)]
pub struct JumpEvents {
    pub rows: Vec<usize>,
    pub marks: Vec<f64>,
    pub mark_dim: usize,
}

impl JumpEvents {
    /// Events of intervals `0..N` indexed by node-major row `n * B + p`.
    pub fn from_batch(batch: &PathBatch) -> Self {
        let paths = batch.paths();
        let mut ev = JumpEvents { mark_dim: batch.jumps().mark_dim(), ..Default::default() };
        for n in 0..batch.grid().steps() {
            for p in 0..paths {
                for mark in batch.marks(p, n) {
                    ev.rows.push(n * paths + p);
                    ev.marks.extend_from_slice(mark);
                }
            }
        }
        ev
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// `Y - f dt + <Z, dW> + I dt`, all `[rows, 1]` except `z`, `dw`: `[rows, d]`.
#[allow(clippy::too_many_arguments)]
pub fn transfer(
    tape: &mut Tape,
    problem: &dyn ProblemSpec,
    t: &[f64],
    x: &Tensor,
    y: Var,
    z: Var,
    i: Var,
    dw: Var,
    dt: f64,
) -> Result<Var> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let f = problem.driver(tape, DriverArgs { t, x, y, z, i })?;
    let f_dt = tape.scale(f, dt);
    let zdw = tape.mul(z, dw)?;
    let zdw = tape.row_sum(zdw);
    let i_dt = tape.scale(i, dt);
    let out = tape.sub(y, f_dt)?;
    let out = tape.add(out, zdw)?;
    tape.add(out, i_dt)
}

/// `I_n` on `rows` time/state pairs given the model's values and gradients
/// there; jump shifts re-enter the same model on the same tape.
#[allow(clippy::too_many_arguments)]
pub fn integral_term(
    model: &dyn SolutionModel,
    tape: &mut Tape,
    t: &[f64],
    x: &Tensor,
    y: Var,
    grad_x: Var,
    events: &JumpEvents,
    problem: &dyn ProblemSpec,
    dt: f64,
) -> Result<Var> {
    let rows = t.len();
    let d = problem.dim();
    if x.rows() != rows || x.cols() != d || tape.shape(grad_x) != [rows, d] {
        return Err(Error::Shape { op: "integral_term", lhs: vec![rows, d], rhs: tape.shape(grad_x).to_vec() });
    }

    let mut comp = vec![0.0; rows * d];
    for ((&ti, xi), ci) in t.iter().zip(x.data().chunks_exact(d)).zip(comp.chunks_exact_mut(d)) {
        problem.compensator(ti, xi, ci);
    }
    let comp = tape.constant(Tensor::matrix(rows, d, comp)?);
    let comp = tape.mul(grad_x, comp)?;
    let comp = tape.row_sum(comp);

    if events.is_empty() {
        return Ok(tape.scale(comp, -1.0));
    }

    let m = events.len();
    let md = events.mark_dim;
    let mut jt = Vec::with_capacity(m);
    let mut jx = Vec::with_capacity(m * d);
    let mut beta = vec![0.0; d];
    for (k, &r) in events.rows.iter().enumerate() {
        let xr = &x.data()[r * d..(r + 1) * d];
        problem.jump(t[r], xr, &events.marks[k * md..(k + 1) * md], &mut beta);
        jt.push(t[r]);
        jx.extend(xr.iter().zip(&beta).map(|(a, b)| a + b));
    }
    let shifted = model.value(tape, &jt, &Tensor::matrix(m, d, jx)?)?;
    let base = tape.gather_rows(y, events.rows.clone())?;
    let diff = tape.sub(shifted, base)?;
    let jump_sum = tape.scatter_add_rows(diff, events.rows.clone(), rows)?;
    let jump_sum = tape.scale(jump_sum, 1.0 / dt);
    tape.sub(jump_sum, comp)
}

/// The scheme quantities and the residual of every interval.
pub fn evaluate_scheme(
    model: &dyn SolutionModel,
    tape: &mut Tape,
    batch: &PathBatch,
    problem: &dyn ProblemSpec,
) -> Result<(SchemeEvaluation, Var, Var)> {
    let d = problem.dim();
    if batch.dim() != d || model.state_dim() != d {
        return Err(Error::Shape { op: "loss", lhs: vec![d], rhs: vec![batch.dim(), model.state_dim()] });
    }
    let grid = batch.grid();
    let steps = grid.steps();
    let dt = grid.dt();
    let paths = batch.paths();
    let inner = steps * paths;
    let rows = inner + paths;

    let (t_all, x_all) = batch.node_major(0..steps + 1);
    let (values, grad_all) = model.value_and_grad(tape, &t_all, &x_all)?;

    let t_cur = &t_all[..inner];
    let x_cur = Tensor::matrix(inner, d, x_all.data()[..inner * d].to_vec())?;
    let y_cur = tape.slice_rows(values, 0, inner)?;
    let y_next = tape.slice_rows(values, paths, rows)?;
    let grad_x = tape.slice_rows(grad_all, 0, inner)?;

    let mut sigma = vec![0.0; inner * d * d];
    for ((&ti, xi), si) in t_cur.iter().zip(x_cur.data().chunks_exact(d)).zip(sigma.chunks_exact_mut(d * d)) {
        problem.diffusion(ti, xi, si);
    }
    let z = tape.row_matvec(grad_x, sigma, true)?;

    let events = JumpEvents::from_batch(batch);
    let i = integral_term(model, tape, t_cur, &x_cur, y_cur, grad_x, &events, problem, dt)?;

    let dw = tape.constant(batch.increments_node_major());
    let predicted = transfer(tape, problem, t_cur, &x_cur, y_cur, z, i, dw, dt)?;
    let interval_residual = tape.sub(y_next, predicted)?;

    let y_term = tape.slice_rows(values, inner, rows)?;
    let g: Vec<f64> = x_all.data()[inner * d..].chunks_exact(d).map(|xi| problem.terminal(xi)).collect();
    let g = tape.constant(Tensor::matrix(paths, 1, g)?);
    let terminal_residual = tape.sub(y_term, g)?;

    Ok((SchemeEvaluation { values, grad_x, diffusion_terms: z, integral_terms: i }, interval_residual, terminal_residual))
}

/// Loss of an arbitrary solution model; see [`loss`].
pub fn loss_with_model(
    model: &dyn SolutionModel,
    tape: &mut Tape,
    batch: &PathBatch,
    problem: &dyn ProblemSpec,
) -> Result<(Var, LossBreakdown)> {
    assemble_loss(model, tape, batch, problem, true)
}

fn assemble_loss(
    model: &dyn SolutionModel,
    tape: &mut Tape,
    batch: &PathBatch,
    problem: &dyn ProblemSpec,
    check: bool,
) -> Result<(Var, LossBreakdown)> {
    let (_, interval_residual, terminal_residual) = evaluate_scheme(model, tape, batch, problem)?;
    let steps = batch.grid().steps();
    let paths = batch.paths();

    let sq_int = tape.square(interval_residual);
    let sq_term = tape.square(terminal_residual);

    let b = paths as f64;
    let intervals: Vec<f64> = tape.value(sq_int).data().chunks_exact(paths).map(|c| c.iter().sum::<f64>() / b).collect();
    let terminal = tape.value(sq_term).sum() / b;
    if let Some(n) = intervals.iter().position(|v| !v.is_finite()).filter(|_| check) {
        return Err(Error::NonFiniteLoss { interval: n });
    }
    if check && !terminal.is_finite() {
        return Err(Error::NonFiniteLoss { interval: steps });
    }

    let s_int = tape.sum(sq_int);
    let s_term = tape.sum(sq_term);
    let s = tape.add(s_int, s_term)?;
    let total = tape.scale(s, 1.0 / (b * (steps + 1) as f64));
    let breakdown = LossBreakdown { intervals, terminal, total: tape.value(total).item() };
    Ok((total, breakdown))
}

/// `L(theta)` on `batch`, differentiable in the recorded parameters.
pub fn loss(
    params: &MlpVars,
    tape: &mut Tape,
    batch: &PathBatch,
    problem: &dyn ProblemSpec,
) -> Result<(Var, LossBreakdown)> {
    loss_with_model(params, tape, batch, problem)
}

/// Loss and its gradient with respect to every parameter tensor, in the
/// order of [`MlpParams::tensors`].
pub fn loss_and_grad(
    params: &MlpParams,
    batch: &PathBatch,
    problem: &dyn ProblemSpec,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let (total, breakdown) = loss(&vars, &mut tape, batch, problem)?;
    let grads = tape.backward(total, &vars.vars())?;
    Ok((breakdown, grads))
}

/// Loss value without a backward pass.
pub fn loss_value(params: &MlpParams, batch: &PathBatch, problem: &dyn ProblemSpec) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    Ok(loss(&vars, &mut tape, batch, problem)?.1)
}

/// Loss terms without the finiteness check, for diagnostics after an abort.
pub fn loss_breakdown_unchecked(params: &MlpParams, batch: &PathBatch, problem: &dyn ProblemSpec) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    Ok(assemble_loss(&vars, &mut tape, batch, problem, false)?.1)
}

/// Plain evaluation of the trained approximation at `(t, x)`.
pub fn evaluate_solution(params: &MlpParams, t: f64, x: &[f64]) -> Result<f64> {
    params.evaluate(t, x)
}
