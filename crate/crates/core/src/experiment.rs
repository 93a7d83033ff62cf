//! Training loop, checkpoint evaluation and the time-step convergence study.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::jumpsim::{derive_seed, simulate_forward, PathBatch, TimeGrid};
use crate::metrics::{
    convergence_table, error_grid, write_convergence_csv, write_error_by_time_csv, write_error_grid_csv,
    write_metrics_csv, ConvergenceInput, ConvergenceRow, MetricsReport,
};
use crate::nn::MlpParams;
use crate::optim::{adam_step, AdamState};
use crate::problems::ProblemSpec;
use crate::scheme::{loss_and_grad, loss_breakdown_unchecked, loss_value, LossBreakdown};

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub history: Vec<MetricsReport>,
    pub params: MlpParams,
}

impl TrainingOutcome {
    pub fn final_report(&self) -> &MetricsReport {
        self.history.last().expect("history always holds the final row")
    }
}

#[derive(Serialize)]
struct LossLine<'a> {
    iteration: usize,
    #[serde(flatten)]
    breakdown: &'a LossBreakdown,
}

pub fn time_grid(config: &TrainConfig, problem: &dyn ProblemSpec) -> Result<TimeGrid> {
    TimeGrid::new(problem.horizon(), config.steps)
}

/// The held-out evaluation batch of a config.
pub fn evaluation_batch(config: &TrainConfig, problem: &dyn ProblemSpec) -> Result<PathBatch> {
    simulate_forward(problem, time_grid(config, problem)?, config.eval_batch_size, config.seeds.evaluation)
}

/// Learning rate of the update that produced the parameters at `iteration`.
pub fn reported_lr(config: &TrainConfig, iteration: usize) -> f64 {
    config.schedule.lr_at(iteration.saturating_sub(1))
}

/// Metrics row of `params` on the held-out batch.
pub fn checkpoint_row(
    config: &TrainConfig,
    problem: &dyn ProblemSpec,
    params: &MlpParams,
    eval_batch: &PathBatch,
    iteration: usize,
) -> Result<MetricsReport> {
    let loss = loss_value(params, eval_batch, problem)?.total;
    MetricsReport::evaluate(params, eval_batch, problem, iteration, loss, reported_lr(config, iteration))
}

/// Runs the training loop of `config` without touching the filesystem
/// beyond the optional per-iteration loss log.
pub fn train(config: &TrainConfig, problem: &dyn ProblemSpec, mut loss_log: Option<&mut dyn Write>) -> Result<TrainingOutcome> {
    config.validate()?;
    let started = Instant::now();
    let grid = time_grid(config, problem)?;
    let mut params = MlpParams::init(&config.architecture()?, config.seeds.init)?;
    let mut adam = AdamState::new(&params.tensors(), config.optimizer);
    let eval_batch = evaluation_batch(config, problem)?;
    let mut history = Vec::new();

    let abort = |iteration: usize, err: Error, breakdown: String| Error::TrainingAborted {
        iteration,
        reason: err.to_string(),
        breakdown,
    };

    for k in 0..config.iterations {
        if k % config.checkpoint_interval == 0 {
            let mut row = checkpoint_row(config, problem, &params, &eval_batch, k).map_err(|e| abort(k, e, "{}".into()))?;
            row.wall_clock = started.elapsed().as_secs_f64();
            log::info!(
                "{} iter {k}: loss {:.3e}, rel err {:.3e}, rel err t0 {:.3e}",
                config.name,
                row.loss,
                row.mean_rel_err,
                row.rel_err_t0
            );
            history.push(row);
        }

        let batch = simulate_forward(problem, grid, config.batch_size, derive_seed(config.seeds.simulation, k as u64))
            .map_err(|e| abort(k, e, "{}".into()))?;
        let (breakdown, grads) = match loss_and_grad(&params, &batch, problem) {
            Ok(v) => v,
            Err(e) => {
                let dump = loss_breakdown_unchecked(&params, &batch, problem).map(|b| b.to_json()).unwrap_or_default();
                return Err(abort(k, e, dump));
            }
        };
        if let Some(w) = loss_log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &LossLine { iteration: k, breakdown: &breakdown })?;
            w.write_all(b"\n")?;
        }
        let lr = config.schedule.lr_at(k);
        adam_step(&mut params.tensors_mut(), &grads, &mut adam, lr).map_err(|e| abort(k, e, breakdown.to_json()))?;
    }

    let n = config.iterations;
    let mut row = checkpoint_row(config, problem, &params, &eval_batch, n).map_err(|e| abort(n, e, "{}".into()))?;
    row.wall_clock = started.elapsed().as_secs_f64();
    log::info!("{} final: loss {:.3e}, rel err {:.3e}", config.name, row.loss, row.mean_rel_err);
    history.push(row);
    Ok(TrainingOutcome { history, params })
}

/// Trains and writes `metrics.csv`, `error_by_time.csv`, `error_grid.csv`,
/// `loss.jsonl`, `params.json` and a copy of the config to the output
/// directory.
pub fn run_experiment(config: &TrainConfig) -> Result<TrainingOutcome> {
    config.validate()?;
    let problem = config.problem.build()?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), config.to_toml_string()?)?;

    let mut log = BufWriter::new(File::create(out.join("loss.jsonl"))?);
    let result = train(config, problem.as_ref(), Some(&mut log));
    log.flush()?;
    let outcome = result?;

    write_outputs(config, problem.as_ref(), &outcome, out)?;
    Ok(outcome)
}

fn write_outputs(config: &TrainConfig, problem: &dyn ProblemSpec, outcome: &TrainingOutcome, out: &Path) -> Result<()> {
    write_metrics_csv(&out.join("metrics.csv"), &outcome.history)?;
    let grid = time_grid(config, problem)?;
    write_error_by_time_csv(&out.join("error_by_time.csv"), &grid.times(), &outcome.final_report().rel_err_by_node)?;
    let eval_batch = evaluation_batch(config, problem)?;
    let heat = error_grid(&outcome.params, &eval_batch, problem, config.error_grid_bins)?;
    write_error_grid_csv(&out.join("error_grid.csv"), &heat)?;
    outcome.params.save_json(&out.join("params.json"))?;
    Ok(())
}

/// Re-evaluates saved parameters as the final checkpoint row of `config`.
pub fn evaluate_checkpoint(config: &TrainConfig, params: &MlpParams) -> Result<MetricsReport> {
    let problem = config.problem.build()?;
    if params.architecture != config.architecture()? {
        return Err(Error::Checkpoint("parameters do not match the configured architecture".into()));
    }
    let eval_batch = evaluation_batch(config, problem.as_ref())?;
    checkpoint_row(config, problem.as_ref(), params, &eval_batch, config.iterations)
}

#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    pub steps: Vec<usize>,
    pub runs: usize,
    pub keep: usize,
}

#[derive(Debug, Clone)]
pub struct ConvergenceOutcome {
    pub rows: Vec<ConvergenceRow>,
    pub inputs: Vec<ConvergenceInput>,
}

/// Trains `runs` models per step count with seeds shifted by the run index
/// and tabulates the mean of the `keep` smallest max square errors. A failed
/// run is logged and excluded.
pub fn run_convergence_study(template: &TrainConfig, study: &ConvergenceStudy) -> Result<ConvergenceOutcome> {
    if study.keep == 0 || study.runs < study.keep {
        return Err(Error::Config(format!("need runs >= keep >= 1, got runs={} keep={}", study.runs, study.keep)));
    }
    if study.steps.is_empty() || study.steps.contains(&0) {
        return Err(Error::Config("step list must be non-empty and positive".into()));
    }
    template.validate()?;
    let problem = template.problem.build()?;

    let mut inputs = Vec::with_capacity(study.steps.len());
    for &steps in &study.steps {
        let mut run_errors = Vec::with_capacity(study.runs);
        for run in 0..study.runs {
            let mut cfg = template.clone();
            cfg.steps = steps;
            cfg.seeds = template.seeds.offset(run as u64);
            cfg.name = format!("{}-N{steps}-run{run}", template.name);
            match train(&cfg, problem.as_ref(), None) {
                Ok(o) => {
                    let err = o.final_report().max_sq_err;
                    log::info!("N={steps} run {run}: max square error {err:.4e}");
                    run_errors.push(err);
                }
                Err(e) => {
                    log::warn!("N={steps} run {run} failed: {e}");
                    run_errors.push(f64::NAN);
                }
            }
        }
        let dt = problem.horizon() / steps as f64;
        inputs.push(ConvergenceInput { steps, dt, run_errors });
    }
    let rows = convergence_table(&inputs, study.keep)?;
    Ok(ConvergenceOutcome { rows, inputs })
}

/// [`run_convergence_study`] plus `convergence.csv` and `convergence_runs.csv`
/// in the template's output directory.
pub fn run_convergence_experiment(template: &TrainConfig, study: &ConvergenceStudy) -> Result<ConvergenceOutcome> {
    let outcome = run_convergence_study(template, study)?;
    let out = &template.output_dir;
    std::fs::create_dir_all(out)?;
    write_convergence_csv(&out.join("convergence.csv"), &outcome.rows)?;
    let mut s = String::from("N,run,max_sq_err\n");
    for input in &outcome.inputs {
        for (run, e) in input.run_errors.iter().enumerate() {
            s.push_str(&format!("{},{run},{e:e}\n", input.steps));
        }
    }
    std::fs::write(out.join("convergence_runs.csv"), s)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> TrainConfig {
        let s = format!(
            r#"
name = "tiny"
steps = 4
batch_size = 16
iterations = 6
checkpoint_interval = 3
eval_batch_size = 32
output_dir = "{}"

[problem]
kind = "pide_1d"
intensity = 0.3
tau = 0.4
epsilon = 0.25
mark_mean = 0.4
mark_std = 0.25

[network]
hidden = [8]
activation = {{ kind = "tanh" }}

[schedule]
kind = "constant"
rate = 1e-2

[seeds]
simulation = 11
init = 12
evaluation = 13
"#,
            dir.display()
        );
        TrainConfig::from_toml_str(&s).unwrap()
    }

    #[test]
    fn history_has_checkpoints_and_final_row() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let p = cfg.problem.build().unwrap();
        let o = train(&cfg, p.as_ref(), None).unwrap();
        let its: Vec<usize> = o.history.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 3, 6]);
        assert!(o.history.iter().all(|r| r.rel_err_by_node.len() == 5));
    }

    #[test]
    fn training_reduces_loss() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.iterations = 60;
        cfg.checkpoint_interval = 60;
        let p = cfg.problem.build().unwrap();
        let o = train(&cfg, p.as_ref(), None).unwrap();
        assert!(o.final_report().loss < o.history[0].loss);
    }

    #[test]
    fn outputs_written_and_checkpoint_reproduces_final_row() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let o = run_experiment(&cfg).unwrap();
        for f in ["metrics.csv", "error_by_time.csv", "error_grid.csv", "loss.jsonl", "params.json", "config.toml"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let lines = std::fs::read_to_string(dir.path().join("loss.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 6);
        assert!(lines.starts_with("{\"iteration\":0,\"intervals\":["));

        let loaded = MlpParams::load_json(&dir.path().join("params.json")).unwrap();
        let mut row = evaluate_checkpoint(&cfg, &loaded).unwrap();
        row.wall_clock = o.final_report().wall_clock;
        assert_eq!(&row, o.final_report());
    }

    #[test]
    fn convergence_study_validates_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let bad = ConvergenceStudy { steps: vec![2], runs: 1, keep: 2 };
        assert!(matches!(run_convergence_study(&cfg, &bad), Err(Error::Config(_))));
        let one = ConvergenceStudy { steps: vec![2, 4], runs: 1, keep: 1 };
        let out = run_convergence_experiment(&cfg, &one).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert!(out.rows[0].order.is_none() && out.rows[1].order.is_some());
        let csv = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
        assert!(csv.starts_with("N,dt,max_sq_err,order\n2,0.5,"));
    }
}
