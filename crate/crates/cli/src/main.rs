//! `skd`: experiment runner for blockwise teacher-routed distillation.
//!
//! Exit codes: 0 on success, 2 for configuration or data errors, 3 when a
//! numerical contract fails (gradient oracle, shape or training invariants).

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use output::RunDir;
use stablekd::Error;

#[derive(Parser)]
#[command(name = "skd", version, about = "Blockwise knowledge distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network with plain cross-entropy.
    TrainTeacher(RunArgs),
    /// Blockwise distillation with progressive recomposition.
    Distill(RunArgs),
    /// End-to-end distillation baseline.
    DistillVanilla(RunArgs),
    /// Accuracy of a saved checkpoint.
    Eval(OptionalOut),
    /// Compare every backward rule against central differences.
    Gradcheck(GradcheckArgs),
    /// Fluctuation, head-distance and block-count experiments.
    Stability(RunArgs),
    /// Distillation on nested stratified subsets of the training set.
    SubsetSweep(RunArgs),
}

#[derive(Args)]
struct Overrides {
    /// Replaces the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the config's `workers`; SKD_THREADS caps it.
    #[arg(long)]
    workers: Option<usize>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct OptionalOut {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Accepted for a uniform grammar; the check needs no configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// First input seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    overwrite: bool,
}

fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("SKD_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("SKD_THREADS must be a positive integer, got {v:?}")).into()),
        },
        Err(_) => Ok(None),
    }
}

fn load(config: &std::path::Path, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(w) = o.workers {
        cfg.workers = w;
    }
    if let Some(cap) = thread_cap()? {
        cfg.workers = cfg.workers.min(cap);
    }
    Ok(cfg)
}

type Body = fn(&ExperimentConfig, &RunDir) -> Result<()>;

fn run_in_dir(args: &RunArgs, body: Body) -> Result<()> {
    let cfg = load(&args.config, &args.overrides)?;
    let dir = RunDir::create(&args.out, args.overrides.overwrite)?;
    body(&cfg, &dir)?;
    let path = dir.commit()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher(a) => run_in_dir(&a, commands::train_teacher),
        Command::Distill(a) => run_in_dir(&a, commands::distill),
        Command::DistillVanilla(a) => run_in_dir(&a, commands::distill_vanilla),
        Command::Stability(a) => run_in_dir(&a, commands::stability),
        Command::SubsetSweep(a) => run_in_dir(&a, commands::subset_sweep),
        Command::Eval(a) => {
            let cfg = load(&a.config, &a.overrides)?;
            let dir = a.out.as_deref().map(|p| RunDir::create(p, a.overrides.overwrite)).transpose()?;
            commands::eval(&cfg, dir.as_ref())?;
            if let Some(d) = dir {
                d.commit()?;
            }
            Ok(())
        }
        Command::Gradcheck(a) => {
            let dir = a.out.as_deref().map(|p| RunDir::create(p, a.overwrite)).transpose()?;
            let seeds: Vec<u64> = (a.seed..a.seed + a.seeds.max(1)).collect();
            let result = commands::gradcheck(&seeds, dir.as_ref());
            // The report is kept even when a check fails.
            if let Some(d) = dir {
                d.commit()?;
            }
            result
        }
    }
}

/// 3 for broken numerical contracts, 2 for everything the user can fix in
/// the config or data.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<Error>().map(Error::root),
            Some(Error::Contract(_) | Error::Oracle(_) | Error::Dimension { .. })
        )
    });
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
