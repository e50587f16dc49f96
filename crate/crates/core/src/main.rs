use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use metareg::diagnostics::diagnose;
use metareg::harness::{self, load_checkpoint, ExperimentConfig};
use metareg::learners::evaluate;
use metareg::pacbayes::empirical_bound_audit;
use metareg::rng::stream;
use metareg::tasks::{meta_batch, Split};

/// Thread count for parallel per-task work.
const THREADS_ENV: &str = "METAREG_THREADS";

#[derive(Parser)]
#[command(name = "metareg", version, about = "Meta-regularized MAML and CNP experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write results, logs and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on fresh meta-test tasks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the config once per β value and aggregate.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        beta: Vec<f64>,
    },
    /// PAC-Bayes bound of a weight-regularized checkpoint on meta-training tasks.
    Bound {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 100)]
        tasks: usize,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Memorization diagnostics of a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize results.csv in a directory and write plot data.
    Report { dir: PathBuf },
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("{THREADS_ENV} must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    configure_threads()?;
    match cli.command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            let summary = harness::run(&cfg)?;
            for r in &summary.rows {
                println!("seed {} {}: test metric {:.4} (se {:.4})", r.seed, r.method, r.test_metric, r.test_metric_se);
            }
            for f in &summary.faults {
                eprintln!("seed {} faulted: {}", f.seed, f.message);
            }
            if !summary.faults.is_empty() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Eval { checkpoint, tasks, seed } => {
            let (learner, spec) = load_checkpoint(&checkpoint)?;
            let source = spec.experiment.task.source(Split::MetaTest)?;
            let report = evaluate(&learner, &source, tasks, learner.config().samples, &mut stream(seed, "cli_eval"))?;
            print_json(&report)?;
        }
        Command::Sweep { config, beta } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            for r in harness::sweep(&cfg, &beta)? {
                println!(
                    "beta {:e}: metric {:.4} ({:.4}), pre-update {:.4}",
                    r.beta, r.mean_metric, r.sd_metric, r.mean_pre_update
                );
            }
        }
        Command::Bound {
            checkpoint,
            delta,
            tasks,
            samples,
            seed,
        } => {
            let (learner, spec) = load_checkpoint(&checkpoint)?;
            let source = spec.experiment.task.source(Split::MetaTrain)?;
            let tasks = meta_batch(&source, tasks, &mut stream(seed, "cli_bound_tasks"))?;
            let report = empirical_bound_audit(&learner, &tasks, delta, samples, &mut stream(seed, "cli_bound"))?;
            print_json(&report)?;
        }
        Command::Diagnose { checkpoint, seed } => {
            let (learner, spec) = load_checkpoint(&checkpoint)?;
            let source = spec.experiment.task.source(Split::MetaTrain)?;
            let report = diagnose(&learner, &source, &spec.experiment.diagnostics, &mut stream(seed, "cli_diagnose"))?;
            print_json(&report)?;
        }
        Command::Report { dir } => {
            print!("{}", harness::report(&dir)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
