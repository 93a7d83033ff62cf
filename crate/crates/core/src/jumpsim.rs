//! Euler-Maruyama simulation of the forward jump-diffusion
//!
//! `X' = X + b dt + sigma dW + sum_i beta(e_i) - c dt`
//!
//! with compound-Poisson jumps and the closed-form compensator `c`. Every
//! Brownian increment and jump mark is stored so the loss can reuse them.
//!
//! Each path draws from its own ChaCha stream keyed by `(seed, path index)`,
//! so a batch does not depend on the order in which paths are generated.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::problems::{PathRng, ProblemSpec};
use crate::tensor::Tensor;

/// Uniform partition of `[0, T]` into `N` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!("need T > 0 and N >= 1, got T={horizon}, N={steps}")));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// `t_n = n T / N`
    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.horizon / self.steps as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|n| self.time(n)).collect()
    }
}

/// Ragged per-(path, interval) jump marks.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpMarks {
    mark_dim: usize,
    /// `offsets[k]..offsets[k + 1]` indexes the jumps of cell `k = p * N + n`.
    offsets: Vec<usize>,
    marks: Vec<f64>,
}

impl JumpMarks {
    pub fn mark_dim(&self) -> usize {
        self.mark_dim
    }

    pub fn total(&self) -> usize {
        self.offsets.last().copied().unwrap_or(0)
    }

    fn cell(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }
}

/// Simulated forward trajectories with all the randomness that drove them.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    grid: TimeGrid,
    dim: usize,
    paths: usize,
    seed: u64,
    /// `[path][node][coord]`
    states: Vec<f64>,
    /// `[path][interval][coord]`, each `N(0, dt)`
    dw: Vec<f64>,
    jumps: JumpMarks,
}

impl PathBatch {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn jumps(&self) -> &JumpMarks {
        &self.jumps
    }

    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        let n1 = self.grid.steps + 1;
        let start = (path * n1 + node) * self.dim;
        &self.states[start..start + self.dim]
    }

    pub fn brownian_increment(&self, path: usize, interval: usize) -> &[f64] {
        let start = (path * self.grid.steps + interval) * self.dim;
        &self.dw[start..start + self.dim]
    }

    pub fn jump_count(&self, path: usize, interval: usize) -> usize {
        self.jumps.cell(path * self.grid.steps + interval).len()
    }

    /// Marks sampled on `(path, interval)`.
    pub fn marks(&self, path: usize, interval: usize) -> impl Iterator<Item = &[f64]> + '_ {
        let range = self.jumps.cell(path * self.grid.steps + interval);
        let md = self.jumps.mark_dim;
        self.jumps.marks[range.start * md..range.end * md].chunks_exact(md.max(1))
    }

    /// Times and states for nodes `nodes` stacked node-major
    /// (row `k * B + p` holds node `nodes.start + k` of path `p`).
    pub fn node_major(&self, nodes: std::ops::Range<usize>) -> (Vec<f64>, Tensor) {
        let rows = nodes.len() * self.paths;
        let mut t = Vec::with_capacity(rows);
        let mut x = Vec::with_capacity(rows * self.dim);
        for n in nodes {
            let tn = self.grid.time(n);
            for p in 0..self.paths {
                t.push(tn);
                x.extend_from_slice(self.state(p, n));
            }
        }
        (t, Tensor::matrix(rows, self.dim, x).expect("node-major shape"))
    }

    /// Brownian increments stacked interval-major, `[N * B, d]`.
    pub fn increments_node_major(&self) -> Tensor {
        let n = self.grid.steps;
        let mut data = Vec::with_capacity(n * self.paths * self.dim);
        for i in 0..n {
            for p in 0..self.paths {
                data.extend_from_slice(self.brownian_increment(p, i));
            }
        }
        Tensor::matrix(n * self.paths, self.dim, data).expect("increment shape")
    }

    /// The same trajectories reordered so that path `k` of the result is path
    /// `order[k]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<PathBatch> {
        let mut seen = vec![false; self.paths];
        if order.len() != self.paths || !order.iter().all(|&p| p < self.paths && !std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!("not a permutation of {} paths", self.paths)));
        }
        let (n, d, md) = (self.grid.steps, self.dim, self.jumps.mark_dim);
        let mut states = Vec::with_capacity(self.states.len());
        let mut dw = Vec::with_capacity(self.dw.len());
        let mut offsets = vec![0];
        let mut marks = Vec::with_capacity(self.jumps.marks.len());
        for &p in order {
            states.extend_from_slice(&self.states[p * (n + 1) * d..(p + 1) * (n + 1) * d]);
            dw.extend_from_slice(&self.dw[p * n * d..(p + 1) * n * d]);
            for i in 0..n {
                let range = self.jumps.cell(p * n + i);
                marks.extend_from_slice(&self.jumps.marks[range.start * md..range.end * md]);
                offsets.push(offsets.last().unwrap() + range.len());
            }
        }
        Ok(PathBatch { states, dw, jumps: JumpMarks { mark_dim: md, offsets, marks }, ..self.clone() })
    }

    /// Inspection dump with columns `path,n,t,x_1..x_d`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("path,n,t");
        for j in 1..=self.dim {
            let _ = write!(out, ",x_{j}");
        }
        out.push('\n');
        for p in 0..self.paths {
            for n in 0..=self.grid.steps {
                let _ = write!(out, "{p},{n},{}", self.grid.time(n));
                for v in self.state(p, n) {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Generator for path `index` of a batch simulated with `seed`.
pub fn path_rng(seed: u64, index: u64) -> PathRng {
    let mut rng = PathRng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Mix `(seed, salt)` into a fresh seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Poisson(`intensity * dt`) draw.
pub fn sample_poisson_counts<R: Rng + ?Sized>(rng: &mut R, intensity: f64, dt: f64) -> Result<u64> {
    let dist = poisson(intensity, dt)?;
    Ok(dist.map_or(0, |d| d.sample(rng) as u64))
}

fn poisson(intensity: f64, dt: f64) -> Result<Option<Poisson<f64>>> {
    if !(intensity >= 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("need intensity >= 0 and dt > 0, got {intensity}, {dt}")));
    }
    let mean = intensity * dt;
    if mean == 0.0 {
        return Ok(None);
    }
    Poisson::new(mean).map(Some).map_err(|e| Error::InvalidArgument(format!("poisson mean {mean}: {e}")))
}

/// Simulate `paths` trajectories of `problem` on `grid`.
pub fn simulate_forward(problem: &dyn ProblemSpec, grid: TimeGrid, paths: usize, seed: u64) -> Result<PathBatch> {
    if paths == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let d = problem.dim();
    let md = problem.mark_dim();
    let x0 = problem.initial_state();
    if x0.len() != d {
        return Err(Error::InvalidArgument(format!("initial state has {} coordinates, expected {d}", x0.len())));
    }
    let n_steps = grid.steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let counts = poisson(problem.intensity(), dt)?;

    let mut states = Vec::with_capacity(paths * (n_steps + 1) * d);
    let mut dw = Vec::with_capacity(paths * n_steps * d);
    let mut offsets = Vec::with_capacity(paths * n_steps + 1);
    offsets.push(0);
    let mut marks = Vec::new();

    let mut drift = vec![0.0; d];
    let mut sigma = vec![0.0; d * d];
    let mut comp = vec![0.0; d];
    let mut beta = vec![0.0; d];
    let mut jump_sum = vec![0.0; d];
    let mut mark = vec![0.0; md];
    let mut next = vec![0.0; d];

    for p in 0..paths {
        let mut rng = path_rng(seed, p as u64);
        let mut x = x0.clone();
        states.extend_from_slice(&x);
        for n in 0..n_steps {
            let t = grid.time(n);
            let inc_start = dw.len();
            for _ in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                dw.push(sqrt_dt * z);
            }
            let count = counts.as_ref().map_or(0, |c| c.sample(&mut rng) as usize);
            jump_sum.fill(0.0);
            for _ in 0..count {
                problem.sample_mark(&mut rng, &mut mark);
                marks.extend_from_slice(&mark);
                problem.jump(t, &x, &mark, &mut beta);
                for (s, b) in jump_sum.iter_mut().zip(&beta) {
                    *s += b;
                }
            }
            offsets.push(offsets.last().unwrap() + count);

            problem.drift(t, &x, &mut drift);
            problem.diffusion(t, &x, &mut sigma);
            problem.compensator(t, &x, &mut comp);
            let inc = &dw[inc_start..inc_start + d];
            for j in 0..d {
                let noise: f64 = (0..d).map(|k| sigma[j * d + k] * inc[k]).sum();
                next[j] = x[j] + drift[j] * dt + noise + jump_sum[j] - comp[j] * dt;
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { path: p, node: n + 1 });
            }
            x.copy_from_slice(&next);
            states.extend_from_slice(&x);
        }
    }

    Ok(PathBatch { grid, dim: d, paths, seed, states, dw, jumps: JumpMarks { mark_dim: md, offsets, marks } })
}

/// Batch statistics of the compensated jump increment
/// `sum_i beta(t_n, X_n, e_i) - c(t_n, X_n) dt`, per interval and coordinate.
#[derive(Debug, Clone)]
pub struct CompensatorResidual {
    /// `[interval][coord]`
    pub means: Vec<Vec<f64>>,
    /// Monte-Carlo standard error of each mean.
    pub std_errors: Vec<Vec<f64>>,
}

impl CompensatorResidual {
    /// Largest `|mean| / std_error` over all cells with nonzero spread.
    pub fn max_z_score(&self) -> f64 {
        self.means
            .iter()
            .flatten()
            .zip(self.std_errors.iter().flatten())
            .map(|(m, s)| if *s > 0.0 { m.abs() / s } else if *m == 0.0 { 0.0 } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }

    /// `|sum of means| / sqrt(sum of squared std errors)` over every interval
    /// and coordinate. Compensated increments are uncorrelated across
    /// intervals, and coordinates are independent for the benchmark jump laws.
    pub fn pooled_z_score(&self) -> f64 {
        let total: f64 = self.means.iter().flatten().sum();
        let var: f64 = self.std_errors.iter().flatten().map(|s| s * s).sum();
        if var > 0.0 {
            total.abs() / var.sqrt()
        } else if total == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

pub fn compensator_residual(
    problem: &dyn ProblemSpec,
    grid: TimeGrid,
    paths: usize,
    seed: u64,
) -> Result<CompensatorResidual> {
    let batch = simulate_forward(problem, grid, paths, seed)?;
    Ok(compensator_residual_of(problem, &batch))
}

pub fn compensator_residual_of(problem: &dyn ProblemSpec, batch: &PathBatch) -> CompensatorResidual {
    let d = batch.dim();
    let grid = batch.grid();
    let dt = grid.dt();
    let b = batch.paths() as f64;
    let mut beta = vec![0.0; d];
    let mut comp = vec![0.0; d];
    let mut means = Vec::with_capacity(grid.steps());
    let mut std_errors = Vec::with_capacity(grid.steps());
    for n in 0..grid.steps() {
        let t = grid.time(n);
        let mut sum = vec![0.0; d];
        let mut sum_sq = vec![0.0; d];
        for p in 0..batch.paths() {
            let x = batch.state(p, n);
            let mut r = vec![0.0; d];
            for mark in batch.marks(p, n) {
                problem.jump(t, x, mark, &mut beta);
                for (ri, bi) in r.iter_mut().zip(&beta) {
                    *ri += bi;
                }
            }
            problem.compensator(t, x, &mut comp);
            for j in 0..d {
                r[j] -= comp[j] * dt;
                sum[j] += r[j];
                sum_sq[j] += r[j] * r[j];
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / b).collect();
        let se = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / b - m * m).max(0.0) / b).sqrt())
            .collect();
        means.push(mean);
        std_errors.push(se);
    }
    CompensatorResidual { means, std_errors }
}
