use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fbsjnn::config::TrainConfig;
use fbsjnn::experiment::{evaluate_checkpoint, run_convergence_experiment, run_experiment, ConvergenceStudy};
use fbsjnn::nn::MlpParams;
use fbsjnn::Error;

// Large short-lived tensors are allocated every iteration; the system
// allocator returns them to the OS and pays the page faults again.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "fbsjnn", version, about = "Neural solver for PIDEs through forward-backward SDEs with jumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Shifts all three seeds of the config by this offset.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train repeatedly over several step counts and tabulate the max square error.
    Converge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32")]
        steps: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 3)]
        keep: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the final metrics row of saved parameters.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> fbsjnn::Result<()> {
    match cli.command {
        Command::Train { config, out, seed } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            if let Some(seed) = seed {
                cfg.seeds = cfg.seeds.offset(seed);
            }
            let outcome = run_experiment(&cfg)?;
            let r = outcome.final_report();
            println!(
                "iteration {}: loss {:.4e}, mean relative error {:.4}%, relative error at t0 {:.4}%, max square error {:.4e}",
                r.iteration,
                r.loss,
                100.0 * r.mean_rel_err,
                100.0 * r.rel_err_t0,
                r.max_sq_err
            );
            println!("outputs written to {}", cfg.output_dir.display());
        }
        Command::Converge { config, steps, runs, keep, out } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let outcome = run_convergence_experiment(&cfg, &ConvergenceStudy { steps, runs, keep })?;
            println!("{:>4} {:>10} {:>14} {:>8}", "N", "dt", "max sq err", "order");
            for row in &outcome.rows {
                let order = row.order.map_or("-".to_string(), |o| format!("{o:.2}"));
                println!("{:>4} {:>10.5} {:>14.3e} {:>8}", row.steps, row.dt, row.max_sq_err, order);
            }
        }
        Command::Eval { checkpoint, config } => {
            let cfg = TrainConfig::load(&config)?;
            let params = MlpParams::load_json(&checkpoint)?;
            let r = evaluate_checkpoint(&cfg, &params)?;
            println!("iteration,loss,mean_rel_err,rel_err_t0,max_sq_err,lr");
            println!("{},{:e},{:e},{:e},{:e},{:e}", r.iteration, r.loss, r.mean_rel_err, r.rel_err_t0, r.max_sq_err, r.lr);
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numerical() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
