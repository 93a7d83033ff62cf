//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::error::{Error, Result};
use crate::nn::MlpArchitecture;
use crate::optim::{AdamConfig, LrSchedule};
use crate::problems::{bsb_jumps, highdim_pide, pide_1d, pure_jump_1d, ProblemSpec};

fn default_horizon() -> f64 {
    1.0
}
fn default_x0() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    #[serde(rename = "pure_jump_1d")]
    PureJump1d {
        intensity: f64,
        mark_mean: f64,
        mark_std: f64,
        #[serde(default = "default_horizon")]
        horizon: f64,
        #[serde(default = "default_x0")]
        x0: f64,
    },
    #[serde(rename = "pide_1d")]
    Pide1d {
        intensity: f64,
        tau: f64,
        epsilon: f64,
        mark_mean: f64,
        mark_std: f64,
        #[serde(default = "default_horizon")]
        horizon: f64,
        #[serde(default = "default_x0")]
        x0: f64,
    },
    Highdim {
        dim: usize,
        intensity: f64,
        tau: f64,
        epsilon: f64,
        mark_mean: f64,
        mark_std: f64,
        #[serde(default = "default_horizon")]
        horizon: f64,
        #[serde(default = "default_x0")]
        x0: f64,
    },
    Bsb {
        dim: usize,
        intensity: f64,
        rate: f64,
        tau: f64,
        mark_mean: f64,
        mark_std: f64,
        #[serde(default = "default_horizon")]
        horizon: f64,
        #[serde(default = "default_x0")]
        x0: f64,
    },
}

impl ProblemConfig {
    pub fn build(&self) -> Result<Box<dyn ProblemSpec>> {
        let check_horizon = |h: f64| {
            if h > 0.0 && h.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("horizon must be positive, got {h}")))
            }
        };
        Ok(match *self {
            ProblemConfig::PureJump1d { intensity, mark_mean, mark_std, horizon, x0 } => {
                check_horizon(horizon)?;
                let mut p = pure_jump_1d(intensity, mark_mean, mark_std)?;
                p.horizon = horizon;
                p.x0 = x0;
                Box::new(p)
            }
            ProblemConfig::Pide1d { intensity, tau, epsilon, mark_mean, mark_std, horizon, x0 } => {
                check_horizon(horizon)?;
                let mut p = pide_1d(intensity, tau, epsilon, mark_mean, mark_std)?;
                p.horizon = horizon;
                p.x0 = x0;
                Box::new(p)
            }
            ProblemConfig::Highdim { dim, intensity, tau, epsilon, mark_mean, mark_std, horizon, x0 } => {
                check_horizon(horizon)?;
                let mut p = highdim_pide(dim, intensity, tau, epsilon, mark_mean, mark_std)?;
                p.horizon = horizon;
                p.x0 = x0;
                Box::new(p)
            }
            ProblemConfig::Bsb { dim, intensity, rate, tau, mark_mean, mark_std, horizon, x0 } => {
                check_horizon(horizon)?;
                let mut p = bsb_jumps(dim, intensity, rate, tau, mark_mean, mark_std)?;
                p.horizon = horizon;
                p.x0 = x0;
                Box::new(p)
            }
        })
    }

    pub fn dim(&self) -> usize {
        match *self {
            ProblemConfig::PureJump1d { .. } | ProblemConfig::Pide1d { .. } => 1,
            ProblemConfig::Highdim { dim, .. } | ProblemConfig::Bsb { dim, .. } => dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub simulation: u64,
    pub init: u64,
    pub evaluation: u64,
}

impl Seeds {
    /// Shifts every seed by `offset`, keeping the three streams distinct.
    pub fn offset(self, offset: u64) -> Self {
        Self {
            simulation: self.simulation.wrapping_add(offset),
            init: self.init.wrapping_add(offset),
            evaluation: self.evaluation.wrapping_add(offset),
        }
    }
}

fn default_checkpoint_interval() -> usize {
    1000
}
fn default_eval_batch_size() -> usize {
    2000
}
fn default_grid_bins() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub name: String,
    pub problem: ProblemConfig,
    /// Number of time steps `N`.
    pub steps: usize,
    pub batch_size: usize,
    pub network: NetworkConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub schedule: LrSchedule,
    pub iterations: usize,
    #[serde(default = "default_checkpoint_interval")]
    pub checkpoint_interval: usize,
    #[serde(default = "default_eval_batch_size")]
    pub eval_batch_size: usize,
    #[serde(default = "default_grid_bins")]
    pub error_grid_bins: usize,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval must be at least 1");
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size must be at least 1");
        }
        let AdamConfig { beta1, beta2, eps } = self.optimizer;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return bad("optimizer needs 0 <= beta < 1 and eps > 0");
        }
        self.schedule.validate()?;
        self.architecture()?;
        self.problem.build().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn architecture(&self) -> Result<MlpArchitecture> {
        MlpArchitecture::new(self.problem.dim(), self.network.hidden.clone(), self.network.activation)
            .map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
name = "sample"
steps = 10
batch_size = 64
iterations = 20
output_dir = "out"

[problem]
kind = "pure_jump_1d"
intensity = 0.3
mark_mean = 0.4
mark_std = 0.25

[network]
hidden = [16, 16]
activation = { kind = "relu" }

[schedule]
kind = "piecewise"
initial = 1e-3
milestones = [[10, 5e-4]]

[seeds]
simulation = 1
init = 2
evaluation = 3
"#;

    #[test]
    fn parses_with_defaults() {
        let c = TrainConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(c.checkpoint_interval, 1000);
        assert_eq!(c.eval_batch_size, 2000);
        assert_eq!(c.optimizer, AdamConfig::default());
        assert_eq!(c.schedule.lr_at(10), 5e-4);
        let p = c.problem.build().unwrap();
        assert_eq!(p.horizon(), 1.0);
        assert_eq!(p.initial_state(), vec![1.0]);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = TrainConfig::from_toml_str(SAMPLE).unwrap();
        let again = TrainConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn rejects_zero_iterations_and_steps() {
        for (from, to) in [("iterations = 20", "iterations = 0"), ("steps = 10", "steps = 0"), ("batch_size = 64", "batch_size = 0")] {
            let s = SAMPLE.replace(from, to);
            assert!(matches!(TrainConfig::from_toml_str(&s), Err(Error::Config(_))), "{to}");
        }
    }

    #[test]
    fn rejects_missing_seeds_and_unknown_keys() {
        let s = SAMPLE.replace("evaluation = 3\n", "");
        assert!(TrainConfig::from_toml_str(&s).is_err());
        let s = SAMPLE.replace("steps = 10", "steps = 10\nbogus = 1");
        assert!(TrainConfig::from_toml_str(&s).is_err());
    }

    #[test]
    fn rejects_bad_problem_parameters() {
        let s = SAMPLE.replace("mark_std = 0.25", "mark_std = -1.0");
        assert!(matches!(TrainConfig::from_toml_str(&s), Err(Error::Config(_))));
    }

    #[test]
    fn seed_offsets_are_distinct() {
        let s = Seeds { simulation: 1, init: 2, evaluation: 3 };
        assert_eq!(s.offset(5), Seeds { simulation: 6, init: 7, evaluation: 8 });
    }
}
