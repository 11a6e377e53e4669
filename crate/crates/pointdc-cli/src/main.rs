//! `pointdc`: scripted runs of the segmentation pipeline. Each subcommand
//! maps to one library entry point and writes a reproducible run directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "pointdc",
    version,
    about = "Unsupervised point-cloud segmentation: synthesize, partition, distill, cluster, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Partition dataset clouds into super-voxels.
    Partition {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill multi-view features into a point network.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        partitions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Refine a distilled network by iterative super-voxel clustering.
    Svc {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        partitions: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the point-level clustering baseline from scratch.
    Baseline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint's predictions against ground truth.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        partitions: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a linear probe on frozen features against ground truth.
    Probe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn effective_config(path: Option<&PathBuf>, seed: Option<u64>) -> Result<RunConfig, String> {
    let mut config = RunConfig::load(path.map(|p| p.as_path()))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            commands::synth(&effective_config(config.as_ref(), seed)?, &out)
        }
        Command::Partition {
            config,
            data,
            out,
            seed,
        } => commands::partition_cmd(&effective_config(config.as_ref(), seed)?, &data, &out),
        Command::Distill {
            config,
            data,
            partitions,
            out,
            seed,
        } => commands::distill(
            &effective_config(config.as_ref(), seed)?,
            &data,
            &partitions,
            &out,
        ),
        Command::Svc {
            config,
            data,
            partitions,
            checkpoint,
            out,
            seed,
        } => commands::svc(
            &effective_config(config.as_ref(), seed)?,
            &data,
            &partitions,
            checkpoint.as_deref(),
            &out,
        ),
        Command::Baseline {
            config,
            data,
            out,
            seed,
        } => commands::baseline(&effective_config(config.as_ref(), seed)?, &data, &out),
        Command::Eval {
            config,
            data,
            partitions,
            checkpoint,
            out,
            seed,
        } => commands::eval(
            &effective_config(config.as_ref(), seed)?,
            &data,
            partitions.as_deref(),
            checkpoint.as_deref(),
            &out,
        ),
        Command::Probe {
            config,
            data,
            checkpoint,
            out,
            seed,
        } => commands::probe(
            &effective_config(config.as_ref(), seed)?,
            &data,
            checkpoint.as_deref(),
            &out,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            // First line of clap's output is the machine-parsable part.
            let line = e.to_string();
            eprintln!("{}", line.lines().next().unwrap_or("error: bad arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
