use std::path::PathBuf;
use std::process::ExitCode;

use bevmotion_cli::commands;
use bevmotion_cli::config::{Overrides, RunConfig};
use bevmotion_cli::error::CliError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bevmotion", version, about = "Self-supervised BEV motion prediction on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Args)]
struct Flags {
    /// TOML run configuration; defaults describe the standard toy setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory (written by `gen`, read by the others).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// `alpha,beta,gamma,sigma`, or `full` / `sup-only`.
    #[arg(long, global = true)]
    weights: Option<String>,
    #[arg(long, global = true)]
    no_msm: bool,
    #[arg(long, global = true)]
    no_backward: bool,
    #[arg(long, global = true)]
    no_forward: bool,
    #[arg(long, global = true)]
    no_cluster: bool,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen,
    /// Pseudo labels and their recovery error against ground truth.
    Pseudo,
    /// Train a model and report its metrics.
    Train,
    /// Evaluate a checkpoint.
    Eval {
        /// Score the ground truth itself instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Train every on/off combination of the cluster, backward and forward terms.
    Ablate,
    /// Time the transport solver and pseudo-labeling.
    Bench,
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let f = cli.flags;
    let mut cfg = RunConfig::load(f.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: f.seed,
        out: f.out,
        data: f.data,
        checkpoint: f.checkpoint,
        weights: f.weights,
        no_msm: f.no_msm,
        no_backward: f.no_backward,
        no_forward: f.no_forward,
        no_cluster: f.no_cluster,
        epsilon: f.epsilon,
        epochs: f.epochs,
    })?;
    cfg.validate()?;
    let run = match cli.command {
        Command::Gen => commands::gen(&cfg)?,
        Command::Pseudo => commands::pseudo(&cfg)?,
        Command::Train => commands::train_cmd(&cfg)?,
        Command::Eval { oracle } => commands::eval(&cfg, oracle)?,
        Command::Ablate => commands::ablate(&cfg)?,
        Command::Bench => commands::bench(&cfg)?,
    };
    Ok(run.dir)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(dir) => {
            eprintln!("run directory: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
