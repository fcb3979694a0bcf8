use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use posenet_cli::commands;
use posenet_cli::run_config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(
    name = "posenet",
    version,
    about = "Train and evaluate a convolutional sequence-to-sequence model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the model, training and task seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write training and held-out corpora as `src-ids<TAB>tgt-ids` lines.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, logging metrics and writing checkpoints under --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Print one metrics line for a checkpoint on the held-out set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Greedy-decode id sequences read from stdin, one per line.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate every point of the ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, ConfigError> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.resolve(seed)
}

/// Config for commands that can fall back to the checkpoint's own settings.
fn load_optional(common: &Common) -> Result<Option<RunConfig>, ConfigError> {
    match &common.config {
        Some(p) => load(Some(p), common.seed).map(Some),
        None => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = load(common.config.as_deref(), common.seed)?;
            commands::gen_data(&cfg, &out, &mut stdout)
        }
        Command::Train { common, out, ckpt } => {
            let cfg = load(common.config.as_deref(), common.seed)?;
            commands::train(&cfg, &out, ckpt.as_deref(), &mut stdout).map(drop)
        }
        Command::Eval { common, ckpt } => {
            let cfg = load_optional(&common)?;
            commands::eval(cfg.as_ref(), &ckpt, &mut stdout).map(drop)
        }
        Command::Translate { common, ckpt } => {
            let cfg = load_optional(&common)?;
            commands::translate(cfg.as_ref(), &ckpt, &mut io::stdin().lock(), &mut stdout)
        }
        Command::Gradcheck { common } => {
            let cfg = load(common.config.as_deref(), common.seed)?;
            commands::gradcheck(&cfg, &mut stdout)
        }
        Command::Ablate { common, out } => {
            let cfg = load(common.config.as_deref(), common.seed)?;
            commands::ablate(&cfg, &out, &mut stdout).map(drop)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err) as u8)
        }
    }
}
