use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kcgg_core::harness::{self, ExperimentConfig};
use kcgg_core::Error;
use log::error;

/// Trajectory diffusion with kinematic constraint gradient guidance:
/// demonstration data, training and the air-hockey defend experiments.
#[derive(Parser, Debug)]
#[command(name = "kcgg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for episode-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate scripted-expert demonstrations.
    GenerateData,
    /// Train the noise-prediction network.
    Train,
    /// Compare sampling methods on shared defend episodes.
    Evaluate,
    /// Block rate across sampling-time budgets.
    Sweep,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("KCGG_LOG_LEVEL", "info");
    env_logger::Builder::from_env(env).format_timestamp(None).init();
}

fn run(cli: &Cli) -> Result<(), Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if cli.parallel == 0 {
        return Err(Error::Config("--parallel must be at least 1".into()));
    }
    match cli.command {
        Command::GenerateData => {
            let (set, stats) = harness::cmd_generate_data(&cfg)?;
            println!(
                "{} demos ({:?} per style), {} of {} launches rejected -> {}",
                set.demos.len(),
                set.counts(),
                stats.rejected,
                stats.attempts,
                cfg.dataset_path.display()
            );
        }
        Command::Train => {
            let out = harness::cmd_train(&cfg)?;
            println!(
                "final loss {:.6} -> {} (curve: {})",
                out.curve.last().copied().unwrap_or(f64::NAN),
                cfg.model_path.display(),
                out.loss_csv.display()
            );
        }
        Command::Evaluate | Command::Sweep => {
            let out = if matches!(cli.command, Command::Evaluate) {
                harness::cmd_evaluate(&cfg, cli.parallel)?
            } else {
                harness::cmd_sweep(&cfg, cli.parallel)?
            };
            println!(
                "{:<24} {:>7} {:>4} {:>7} {:>17} {:>8}",
                "method", "budget", "T", "block", "95% CI", "ms/step"
            );
            for r in &out.report.rows {
                println!(
                    "{:<24} {:>7} {:>4} {:>7.3} [{:.3}, {:.3}] {:>8.3}",
                    r.method, r.budget_ms, r.steps, r.block_rate, r.ci_low, r.ci_high, r.ms_per_step
                );
            }
            println!("-> {}", out.metrics_csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
