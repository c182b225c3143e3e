use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dlrt_cli::commands::{cmd_benchmark, cmd_evaluate, cmd_prune_retrain, BenchOptions, PruneTarget};
use dlrt_cli::config::{OptimizerKind, Overrides, RunConfig, DATA_DIR_ENV};
use dlrt_cli::train::cmd_train;
use dlrt_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "dlrt", version, about = "Dynamical low-rank training of neural networks on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network (adaptive DLRT, fixed-rank DLRT or dense baseline).
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split of the run that produced it.
    Evaluate {
        /// Checkpoint directory (containing manifest.json).
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// SVD-truncate a dense checkpoint, then retrain at fixed ranks.
    PruneRetrain {
        /// Dense checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Time training steps and prediction across ranks and against the dense baseline.
    Benchmark {
        /// Ranks to time, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128")]
        ranks: Vec<usize>,
        /// Timed training steps per model.
        #[arg(long, default_value_t = 50)]
        warm_batches: usize,
        /// Timed prediction passes per model.
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        /// Limit the prediction set to this many test samples.
        #[arg(long)]
        predict_samples: Option<usize>,
        /// Evaluate prediction chunks on this many threads.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// MNIST directory with the four IDX files.
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Adaptive truncation tolerance in (0, 1).
    #[arg(long)]
    tau: Option<f64>,
    /// Fixed ranks of the low-rank layers, comma separated.
    #[arg(long, value_delimiter = ',')]
    fixed_ranks: Option<Vec<usize>>,
    /// Train every layer dense.
    #[arg(long)]
    dense: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    lr: Option<f64>,
    /// Per-epoch learning-rate factor.
    #[arg(long)]
    lr_decay: Option<f64>,
    /// Architecture preset: mlp500, mlp784, lenet5 or mlp<width>.
    #[arg(long)]
    arch: Option<String>,
    /// Switch adaptive training to fixed ranks after this many epochs.
    #[arg(long)]
    freeze_after_epoch: Option<usize>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            data_dir: self.data_dir.clone(),
            out: self.out.clone(),
            seed: self.seed,
            tau: self.tau,
            fixed_ranks: self.fixed_ranks.clone(),
            dense: self.dense,
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            lr: self.lr,
            lr_decay: self.lr_decay,
            arch: self.arch.clone(),
            freeze_after_epoch: self.freeze_after_epoch,
        }
    }

    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides());
        Ok(cfg)
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let outcome = cmd_train(&args.config()?)?;
            print_json(&outcome.summary)
        }
        Command::Evaluate { checkpoint, run } => {
            if run.config.is_some() {
                return Err(CliError::Config("evaluate reads its config from the checkpoint".into()));
            }
            print_json(&cmd_evaluate(&checkpoint, &run.overrides())?)
        }
        Command::PruneRetrain { checkpoint, run } => {
            let target = match (&run.fixed_ranks, run.tau) {
                (Some(r), None) => PruneTarget::Ranks(r.clone()),
                (None, Some(t)) => PruneTarget::Tau(t),
                _ => return Err(CliError::Config("prune-retrain needs exactly one of --fixed-ranks, --tau".into())),
            };
            let mut overrides = run.overrides();
            overrides.tau = None;
            overrides.fixed_ranks = None;
            print_json(&cmd_prune_retrain(&checkpoint, &target, &overrides)?)
        }
        Command::Benchmark { ranks, warm_batches, repeats, predict_samples, threads, run } => {
            let opts = BenchOptions { ranks, warm_batches, repeats, predict_samples, threads };
            let rows = cmd_benchmark(&run.config()?, &opts)?;
            print_json(&rows)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
