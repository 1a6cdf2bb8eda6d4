mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Experience-feedback residual learning on the token world.
#[derive(Debug, Parser)]
#[command(name = "efn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat key = value config file (TOML syntax).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replaces `seeds` with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one agent per seed; writes checkpoints, banks and metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Deterministic evaluation of a saved checkpoint against a saved bank.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Live bank budget; defaults to `eval_volume`.
        #[arg(long)]
        volume: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Force the residual to zero (base-policy ablation).
        #[arg(long)]
        zero_residual: bool,
    },
    /// Train per seed, then evaluate at every bank volume.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',')]
        volumes: Option<Vec<usize>>,
    },
    /// Inspect or export an experience bank file.
    Bank {
        #[command(subcommand)]
        action: BankAction,
    },
    /// Entropic-OT similarity between two token matrices.
    Sinkhorn {
        /// JSON files holding arrays of rows.
        files: Vec<PathBuf>,
        /// Random TxD pair instead of files, e.g. 64x128.
        #[arg(long, value_name = "TxD", conflicts_with = "files")]
        random: Option<String>,
        #[arg(long, default_value_t = 0)]
        rng_seed: u64,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, default_value_t = 50)]
        iters: usize,
    },
    /// Score the bank against one stored step used as the query.
    Retrieve {
        #[arg(long)]
        bank: PathBuf,
        /// `rollout:step`.
        #[arg(long, value_name = "R:S")]
        query_step: String,
        #[arg(long, default_value_t = 5)]
        top_n: usize,
        #[arg(long, default_value_t = 8)]
        top_k: usize,
        #[arg(long, default_value_t = 0.7)]
        lambda: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
    },
}

#[derive(Debug, Subcommand)]
enum BankAction {
    /// Rollout count, step counts and outcome histogram.
    Inspect { path: PathBuf },
    /// One JSON line per rollout.
    Export {
        path: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
