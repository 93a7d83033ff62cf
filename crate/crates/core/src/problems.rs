//! Problem definitions: the coefficient bundle of a semi-linear PIDE and the
//! forward-backward system with jumps it corresponds to, plus the four
//! benchmark problems.
//!
//! Drivers follow the generic backward map `Y' = Y - f dt + Z.dW + I dt`.
//! The benchmark recursions are written with a source term added to `Y`, so
//! each benchmark stores `f = -(source)`.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Generator for one simulated path.
pub type PathRng = ChaCha8Rng;

/// Tape inputs of a driver evaluated on `rows` time/state pairs.
pub struct DriverArgs<'a> {
    pub t: &'a [f64],
    /// `[rows, d]`
    pub x: &'a Tensor,
    /// `[rows, 1]`
    pub y: Var,
    /// `[rows, d]`
    pub z: Var,
    /// `[rows, 1]`
    pub i: Var,
}

/// One PIDE / forward-backward system with jumps.
///
/// The jump measure is `lambda * phi(e) de` with `phi` a probability density,
/// so jump counts have intensity [`intensity`](ProblemSpec::intensity) and
/// marks are drawn from `phi` by [`sample_mark`](ProblemSpec::sample_mark).
/// [`compensator`](ProblemSpec::compensator) must be `int beta(t, x, e) lambda phi(e) de`
/// for that same law.
pub trait ProblemSpec: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn mark_dim(&self) -> usize;
    fn initial_state(&self) -> Vec<f64>;
    fn horizon(&self) -> f64;
    fn intensity(&self) -> f64;

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// Row-major `d x d`.
    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn jump(&self, t: f64, x: &[f64], mark: &[f64], out: &mut [f64]);
    fn compensator(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn sample_mark(&self, rng: &mut PathRng, out: &mut [f64]);

    /// `f(t, x, y, z, i)` as a `[rows, 1]` tape expression.
    fn driver(&self, tape: &mut Tape, args: DriverArgs<'_>) -> Result<Var>;
    fn driver_value(&self, t: f64, x: &[f64], y: f64, z: &[f64], i: f64) -> f64;

    fn terminal(&self, x: &[f64]) -> f64;
    /// Closed-form solution, used for error metrics only.
    fn exact_solution(&self, t: f64, x: &[f64]) -> Option<f64>;
}

/// Compound-Poisson jump law with Gaussian marks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpLaw {
    pub intensity: f64,
    pub mark_mean: f64,
    pub mark_std: f64,
}

impl JumpLaw {
    pub fn new(intensity: f64, mark_mean: f64, mark_std: f64) -> Result<Self> {
        if !(intensity >= 0.0) || !intensity.is_finite() {
            return Err(Error::InvalidArgument(format!("jump intensity must be >= 0, got {intensity}")));
        }
        if !(mark_std > 0.0) || !mark_std.is_finite() || !mark_mean.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "mark law needs finite mean and positive std, got N({mark_mean}, {mark_std}^2)"
            )));
        }
        Ok(Self { intensity, mark_mean, mark_std })
    }

    fn normal(&self) -> Normal<f64> {
        Normal::new(self.mark_mean, self.mark_std).expect("validated mark law")
    }

    fn sample_into(&self, rng: &mut PathRng, out: &mut [f64]) {
        let normal = self.normal();
        for v in out.iter_mut() {
            *v = normal.sample(rng);
        }
    }

    /// `E[e^z] - 1` for `z ~ N(mean, std^2)`.
    pub fn exp_moment_minus_one(&self) -> f64 {
        (self.mark_mean + 0.5 * self.mark_std * self.mark_std).exp() - 1.0
    }

    /// `E[z^2]`
    pub fn second_moment(&self) -> f64 {
        self.mark_mean * self.mark_mean + self.mark_std * self.mark_std
    }
}

/// `-(source + rate * y)` on the tape.
fn source_driver(tape: &mut Tape, source: Vec<f64>, rate: f64, y: Var) -> Result<Var> {
    let rows = source.len();
    let s = tape.constant(Tensor::matrix(rows, 1, source)?);
    let total = if rate != 0.0 {
        let ry = tape.scale(y, rate);
        tape.add(s, ry)?
    } else {
        s
    };
    Ok(tape.scale(total, -1.0))
}

fn squared_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn fill_diagonal(out: &mut [f64], d: usize, f: impl Fn(usize) -> f64) {
    out.fill(0.0);
    for i in 0..d {
        out[i * d + i] = f(i);
    }
}

/// `du/dt + int (u(t, x e^z) - u - x(e^z - 1) du/dx) nu(dz) = 0`, `u(T, x) = x`.
///
/// Exact solution `u(t, x) = x`.
#[derive(Debug, Clone)]
pub struct PureJump1d {
    pub law: JumpLaw,
    pub horizon: f64,
    pub x0: f64,
}

pub fn pure_jump_1d(intensity: f64, mark_mean: f64, mark_std: f64) -> Result<PureJump1d> {
    Ok(PureJump1d { law: JumpLaw::new(intensity, mark_mean, mark_std)?, horizon: 1.0, x0: 1.0 })
}

impl ProblemSpec for PureJump1d {
    fn name(&self) -> &str {
        "purejump1d"
    }
    fn dim(&self) -> usize {
        1
    }
    fn mark_dim(&self) -> usize {
        1
    }
    fn initial_state(&self) -> Vec<f64> {
        vec![self.x0]
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn intensity(&self) -> f64 {
        self.law.intensity
    }
    fn drift(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn jump(&self, _t: f64, x: &[f64], mark: &[f64], out: &mut [f64]) {
        out[0] = x[0] * (mark[0].exp() - 1.0);
    }
    fn compensator(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.law.intensity * x[0] * self.law.exp_moment_minus_one();
    }
    fn sample_mark(&self, rng: &mut PathRng, out: &mut [f64]) {
        self.law.sample_into(rng, out);
    }
    fn driver(&self, tape: &mut Tape, args: DriverArgs<'_>) -> Result<Var> {
        source_driver(tape, vec![0.0; args.t.len()], 0.0, args.y)
    }
    fn driver_value(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64], _i: f64) -> f64 {
        0.0
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        x[0]
    }
    fn exact_solution(&self, _t: f64, x: &[f64]) -> Option<f64> {
        Some(x[0])
    }
}

/// One-dimensional PIDE with convection `eps x`, diffusion `tau` and the
/// pure-jump integral operator; source `eps x`, exact solution `u(t, x) = x`.
#[derive(Debug, Clone)]
pub struct Pide1d {
    pub law: JumpLaw,
    pub tau: f64,
    pub epsilon: f64,
    pub horizon: f64,
    pub x0: f64,
}

pub fn pide_1d(intensity: f64, tau: f64, epsilon: f64, mark_mean: f64, mark_std: f64) -> Result<Pide1d> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    Ok(Pide1d { law: JumpLaw::new(intensity, mark_mean, mark_std)?, tau, epsilon, horizon: 1.0, x0: 1.0 })
}

impl ProblemSpec for Pide1d {
    fn name(&self) -> &str {
        "pide1d"
    }
    fn dim(&self) -> usize {
        1
    }
    fn mark_dim(&self) -> usize {
        1
    }
    fn initial_state(&self) -> Vec<f64> {
        vec![self.x0]
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn intensity(&self) -> f64 {
        self.law.intensity
    }
    fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.epsilon * x[0];
    }
    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out[0] = self.tau;
    }
    fn jump(&self, _t: f64, x: &[f64], mark: &[f64], out: &mut [f64]) {
        out[0] = x[0] * (mark[0].exp() - 1.0);
    }
    fn compensator(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.law.intensity * x[0] * self.law.exp_moment_minus_one();
    }
    fn sample_mark(&self, rng: &mut PathRng, out: &mut [f64]) {
        self.law.sample_into(rng, out);
    }
    fn driver(&self, tape: &mut Tape, args: DriverArgs<'_>) -> Result<Var> {
        let source = args.x.data().iter().map(|x| self.epsilon * x).collect();
        source_driver(tape, source, 0.0, args.y)
    }
    fn driver_value(&self, _t: f64, x: &[f64], _y: f64, _z: &[f64], _i: f64) -> f64 {
        -(self.epsilon * x[0])
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        x[0]
    }
    fn exact_solution(&self, _t: f64, x: &[f64]) -> Option<f64> {
        Some(x[0])
    }
}

/// `d`-dimensional PIDE with drift `eps x / 2`, diffusion `tau I`, additive
/// jumps `beta = e` with `d`-dimensional i.i.d. Gaussian marks; exact solution
/// `u(t, x) = |x|^2 / d`.
#[derive(Debug, Clone)]
pub struct HighDimPide {
    pub dim: usize,
    pub law: JumpLaw,
    pub tau: f64,
    pub epsilon: f64,
    pub horizon: f64,
    pub x0: f64,
}

pub fn highdim_pide(
    dim: usize,
    intensity: f64,
    tau: f64,
    epsilon: f64,
    mark_mean: f64,
    mark_std: f64,
) -> Result<HighDimPide> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    Ok(HighDimPide { dim, law: JumpLaw::new(intensity, mark_mean, mark_std)?, tau, epsilon, horizon: 1.0, x0: 1.0 })
}

impl HighDimPide {
    fn source(&self, x: &[f64]) -> f64 {
        self.law.intensity * self.law.second_moment()
            + self.tau * self.tau
            + self.epsilon / self.dim as f64 * squared_norm(x)
    }
}

impl ProblemSpec for HighDimPide {
    fn name(&self) -> &str {
        "highdim"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn mark_dim(&self) -> usize {
        self.dim
    }
    fn initial_state(&self) -> Vec<f64> {
        vec![self.x0; self.dim]
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn intensity(&self) -> f64 {
        self.law.intensity
    }
    fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = 0.5 * self.epsilon * xi;
        }
    }
    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        fill_diagonal(out, self.dim, |_| self.tau);
    }
    fn jump(&self, _t: f64, _x: &[f64], mark: &[f64], out: &mut [f64]) {
        out.copy_from_slice(mark);
    }
    fn compensator(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(self.law.intensity * self.law.mark_mean);
    }
    fn sample_mark(&self, rng: &mut PathRng, out: &mut [f64]) {
        self.law.sample_into(rng, out);
    }
    fn driver(&self, tape: &mut Tape, args: DriverArgs<'_>) -> Result<Var> {
        let source = args.x.data().chunks_exact(self.dim).map(|x| self.source(x)).collect();
        source_driver(tape, source, 0.0, args.y)
    }
    fn driver_value(&self, _t: f64, x: &[f64], _y: f64, _z: &[f64], _i: f64) -> f64 {
        -self.source(x)
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        squared_norm(x) / self.dim as f64
    }
    fn exact_solution(&self, _t: f64, x: &[f64]) -> Option<f64> {
        Some(squared_norm(x) / self.dim as f64)
    }
}

/// Black-Scholes-Barenblatt equation with additive jumps: drift `r x`,
/// diffusion `tau diag(x)`, marks as in [`HighDimPide`]; exact solution
/// `u(t, x) = exp((r + tau^2)(T - t)) |x|^2 / d`.
#[derive(Debug, Clone)]
pub struct BsbJumps {
    pub dim: usize,
    pub law: JumpLaw,
    pub rate: f64,
    pub tau: f64,
    pub horizon: f64,
    pub x0: f64,
}

pub fn bsb_jumps(dim: usize, intensity: f64, rate: f64, tau: f64, mark_mean: f64, mark_std: f64) -> Result<BsbJumps> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    Ok(BsbJumps { dim, law: JumpLaw::new(intensity, mark_mean, mark_std)?, rate, tau, horizon: 1.0, x0: 1.0 })
}

impl BsbJumps {
    fn growth(&self, t: f64) -> f64 {
        ((self.rate + self.tau * self.tau) * (self.horizon - t)).exp()
    }

    fn source(&self, t: f64) -> f64 {
        self.law.intensity * self.growth(t) * self.law.second_moment()
    }
}

impl ProblemSpec for BsbJumps {
    fn name(&self) -> &str {
        "bsb"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn mark_dim(&self) -> usize {
        self.dim
    }
    fn initial_state(&self) -> Vec<f64> {
        vec![self.x0; self.dim]
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn intensity(&self) -> f64 {
        self.law.intensity
    }
    fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.rate * xi;
        }
    }
    fn diffusion(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        fill_diagonal(out, self.dim, |i| self.tau * x[i]);
    }
    fn jump(&self, _t: f64, _x: &[f64], mark: &[f64], out: &mut [f64]) {
        out.copy_from_slice(mark);
    }
    fn compensator(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(self.law.intensity * self.law.mark_mean);
    }
    fn sample_mark(&self, rng: &mut PathRng, out: &mut [f64]) {
        self.law.sample_into(rng, out);
    }
    fn driver(&self, tape: &mut Tape, args: DriverArgs<'_>) -> Result<Var> {
        let source = args.t.iter().map(|&t| self.source(t)).collect();
        source_driver(tape, source, self.rate, args.y)
    }
    fn driver_value(&self, t: f64, _x: &[f64], y: f64, _z: &[f64], _i: f64) -> f64 {
        -(self.rate * y + self.source(t))
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        squared_norm(x) / self.dim as f64
    }
    fn exact_solution(&self, t: f64, x: &[f64]) -> Option<f64> {
        Some(self.growth(t) * squared_norm(x) / self.dim as f64)
    }
}
