//! Error metrics against closed-form solutions and their CSV output.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::jumpsim::PathBatch;
use crate::nn::MlpParams;
use crate::problems::ProblemSpec;

/// Floor of the relative-error denominator.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub iteration: usize,
    pub loss: f64,
    pub mean_rel_err: f64,
    pub rel_err_t0: f64,
    pub rel_err_by_node: Vec<f64>,
    pub max_sq_err: f64,
    pub lr: f64,
    /// Seconds since the run started. Never written to the CSV files.
    pub wall_clock: f64,
}

impl MetricsReport {
    pub fn evaluate(
        params: &MlpParams,
        batch: &PathBatch,
        problem: &dyn ProblemSpec,
        iteration: usize,
        loss: f64,
        lr: f64,
    ) -> Result<Self> {
        let e = NodeErrors::compute(params, batch, problem)?;
        Ok(Self {
            iteration,
            loss,
            mean_rel_err: e.mean_relative(),
            rel_err_t0: e.relative[0],
            max_sq_err: e.max_square(),
            rel_err_by_node: e.relative,
            lr,
            wall_clock: 0.0,
        })
    }
}

/// Per-node batch means of the pointwise errors.
#[derive(Debug, Clone)]
pub struct NodeErrors {
    pub relative: Vec<f64>,
    pub square: Vec<f64>,
    pub signed: Vec<f64>,
}

impl NodeErrors {
    pub fn compute(params: &MlpParams, batch: &PathBatch, problem: &dyn ProblemSpec) -> Result<Self> {
        let nodes = batch.grid().steps() + 1;
        let paths = batch.paths() as f64;
        let (t, x) = batch.node_major(0..nodes);
        let predicted = params.evaluate_batch(&t, &x)?;
        let d = batch.dim();
        let mut out = NodeErrors { relative: vec![0.0; nodes], square: vec![0.0; nodes], signed: vec![0.0; nodes] };
        for (r, ((&ti, xi), &yi)) in t.iter().zip(x.data().chunks_exact(d)).zip(&predicted).enumerate() {
            let u = exact(problem, ti, xi)?;
            let n = r / batch.paths();
            let err = yi - u;
            out.relative[n] += err.abs() / u.abs().max(RELATIVE_ERROR_FLOOR);
            out.square[n] += err * err;
            out.signed[n] += err;
        }
        for v in out.relative.iter_mut().chain(&mut out.square).chain(&mut out.signed) {
            *v /= paths;
        }
        Ok(out)
    }

    pub fn mean_relative(&self) -> f64 {
        self.relative.iter().sum::<f64>() / self.relative.len() as f64
    }

    pub fn max_square(&self) -> f64 {
        self.square.iter().copied().fold(0.0, f64::max)
    }
}

fn exact(problem: &dyn ProblemSpec, t: f64, x: &[f64]) -> Result<f64> {
    problem.exact_solution(t, x).ok_or_else(|| Error::MissingExactSolution(problem.name().to_string()))
}

/// Mean over paths and nodes of `|N - u| / max(1e-8, |u|)`.
pub fn mean_relative_error(params: &MlpParams, batch: &PathBatch, problem: &dyn ProblemSpec) -> Result<f64> {
    Ok(NodeErrors::compute(params, batch, problem)?.mean_relative())
}

/// Node-wise version of [`mean_relative_error`], length `N + 1`.
pub fn error_by_time(params: &MlpParams, batch: &PathBatch, problem: &dyn ProblemSpec) -> Result<Vec<f64>> {
    Ok(NodeErrors::compute(params, batch, problem)?.relative)
}

/// `max_n E|N(t_n, X_n) - u(t_n, X_n)|^2`.
pub fn max_square_error(params: &MlpParams, batch: &PathBatch, problem: &dyn ProblemSpec) -> Result<f64> {
    Ok(NodeErrors::compute(params, batch, problem)?.max_square())
}

/// Mean absolute error on a `(node, bin)` grid, binning the first state
/// coordinate into `bins` equal cells spanning the batch range.
#[derive(Debug, Clone)]
pub struct ErrorGrid {
    pub times: Vec<f64>,
    pub bin_centers: Vec<f64>,
    /// `[node][bin]`, `None` for empty cells.
    pub cells: Vec<Vec<Option<f64>>>,
}

pub fn error_grid(params: &MlpParams, batch: &PathBatch, problem: &dyn ProblemSpec, bins: usize) -> Result<ErrorGrid> {
    if bins == 0 {
        return Err(Error::InvalidArgument("error grid needs at least one bin".into()));
    }
    let grid = batch.grid();
    let nodes = grid.steps() + 1;
    let d = batch.dim();
    let (t, x) = batch.node_major(0..nodes);
    let predicted = params.evaluate_batch(&t, &x)?;
    let first: Vec<f64> = x.data().chunks_exact(d).map(|r| r[0]).collect();
    let lo = first.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = first.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };

    let mut sums = vec![vec![0.0; bins]; nodes];
    let mut counts = vec![vec![0usize; bins]; nodes];
    for (r, ((&ti, xi), &yi)) in t.iter().zip(x.data().chunks_exact(d)).zip(&predicted).enumerate() {
        let n = r / batch.paths();
        let b = (((xi[0] - lo) / width) as usize).min(bins - 1);
        sums[n][b] += (yi - exact(problem, ti, xi)?).abs();
        counts[n][b] += 1;
    }
    let cells = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| s.iter().zip(c).map(|(&s, &c)| (c > 0).then(|| s / c as f64)).collect())
        .collect();
    let bin_centers = (0..bins).map(|b| lo + (b as f64 + 0.5) * width).collect();
    Ok(ErrorGrid { times: grid.times(), bin_centers, cells })
}

/// Final errors of every run at one step count.
#[derive(Debug, Clone)]
pub struct ConvergenceInput {
    pub steps: usize,
    pub dt: f64,
    pub run_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub steps: usize,
    pub dt: f64,
    pub max_sq_err: f64,
    pub runs_used: usize,
    /// `None` for the first row.
    pub order: Option<f64>,
}

/// Keeps the `keep` smallest finite errors per step count, averages them and
/// computes the order against the previous row. Step counts with no finite
/// run are skipped with a warning.
pub fn convergence_table(inputs: &[ConvergenceInput], keep: usize) -> Result<Vec<ConvergenceRow>> {
    if keep == 0 {
        return Err(Error::InvalidArgument("keep must be at least 1".into()));
    }
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(inputs.len());
    for input in inputs {
        let mut finite: Vec<f64> = input.run_errors.iter().copied().filter(|e| e.is_finite()).collect();
        let dropped = input.run_errors.len() - finite.len();
        if dropped > 0 {
            log::warn!("N={}: excluding {dropped} run(s) with non-finite error", input.steps);
        }
        if finite.is_empty() {
            log::warn!("N={}: no usable runs, row omitted", input.steps);
            continue;
        }
        finite.sort_by(f64::total_cmp);
        finite.truncate(keep);
        let err = finite.iter().sum::<f64>() / finite.len() as f64;
        let order = rows.last().map(|prev| {
            if prev.max_sq_err == err {
                0.0
            } else {
                (prev.max_sq_err / err).ln() / (prev.dt / input.dt).ln()
            }
        });
        rows.push(ConvergenceRow { steps: input.steps, dt: input.dt, max_sq_err: err, runs_used: finite.len(), order });
    }
    Ok(rows)
}

pub fn write_metrics_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut s = String::from("iteration,loss,mean_rel_err,rel_err_t0,max_sq_err,lr\n");
    for r in reports {
        let _ = writeln!(s, "{},{:e},{:e},{:e},{:e},{:e}", r.iteration, r.loss, r.mean_rel_err, r.rel_err_t0, r.max_sq_err, r.lr);
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_error_by_time_csv(path: &Path, times: &[f64], rel_err: &[f64]) -> Result<()> {
    let mut s = String::from("node,t,rel_err\n");
    for (n, (t, e)) in times.iter().zip(rel_err).enumerate() {
        let _ = writeln!(s, "{n},{t},{e:e}");
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_convergence_csv(path: &Path, rows: &[ConvergenceRow]) -> Result<()> {
    let mut s = String::from("N,dt,max_sq_err,order\n");
    for r in rows {
        let order = r.order.map(|o| format!("{o}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{:e},{}", r.steps, r.dt, r.max_sq_err, order);
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_error_grid_csv(path: &Path, grid: &ErrorGrid) -> Result<()> {
    let mut s = String::from("t,x_bin,mean_abs_err\n");
    for (t, row) in grid.times.iter().zip(&grid.cells) {
        for (x, cell) in grid.bin_centers.iter().zip(row) {
            if let Some(e) = cell {
                let _ = writeln!(s, "{t},{x},{e:e}");
            }
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}
