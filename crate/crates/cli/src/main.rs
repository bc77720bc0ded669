mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "kappa-sphere", version, about = "Concentration-based uncertainty for place-recognition retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run config; missing sections take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalArgs {
    /// Scene or bank directory (bank.kpb + manifest.json).
    #[arg(long)]
    pub data: PathBuf,
    /// Trained model; without it κ comes from the manifest, if present.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated K list.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// equal-width | quantile
    #[arg(long)]
    pub binning: Option<String>,
    /// Comma-separated methods (kappaplace, inverse_kappa, l2, pa, sue, sue_log, gnll).
    #[arg(long, value_delimiter = ',')]
    pub method: Option<Vec<String>>,
    /// Also write reliability diagrams.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Post-train a κ-head on a generated scene.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Jointly train encoder, prototypes and κ-head on a generated scene.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Query-level Recall@K and ECE@K for every method.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Match-level ECE@K.
    MatchEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Print a report file as a table.
    Report {
        #[command(flatten)]
        common: Common,
        /// Report JSON written by eval, match-eval or bench.
        #[arg(long)]
        input: PathBuf,
    },
    /// Forward latency of the descriptor path with and without the κ-head.
    Bench {
        #[command(flatten)]
        common: Common,
    },
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("KAPPA_SPHERE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .with_context(|| format!("KAPPA_SPHERE_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Gen { common } => commands::gen(&common),
        Command::Fit { common, data } => commands::fit(&common, &data),
        Command::Train { common, data } => commands::train(&common, &data),
        Command::Eval { common, args } => commands::eval(&common, &args),
        Command::MatchEval { common, args } => commands::match_eval(&common, &args),
        Command::Report { common, input } => commands::report(&common, &input),
        Command::Bench { common } => commands::bench(&common),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
