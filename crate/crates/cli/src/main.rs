//! `dlf`: command line front end for the multi-atlas segmentation toolkit.
//!
//! Exit codes: 0 success, 1 runtime failure (I/O, bad data, numeric
//! divergence), 2 usage error (bad flags, malformed or unknown config
//! keys). Diagnostics go to stderr; results and progress go to stdout.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    /// The invocation itself is wrong; rerun with different arguments.
    Usage(String),
    /// The invocation is fine but the run failed.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<dlf_core::Error> for CliError {
    fn from(e: dlf_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Mv,
    Svwv,
    Jlf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Dlf,
    Unet,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DropPart {
    Wv,
    Ft,
    Mask,
}

#[derive(Parser)]
#[command(name = "dlf", version, about = "multi-atlas segmentation toolkit")]
struct Cli {
    /// Worker threads (falls back to DLF_WORKERS, then 1).
    /// 1 is the bit-reproducible reference setting.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset
    Synth {
        /// Run configuration file (key=value lines)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a target with a classical fusion method
    Fuse {
        #[arg(long, value_enum)]
        method: Method,
        /// Dataset directory (as written by synth)
        #[arg(long)]
        data: PathBuf,
        /// Subject id to segment; all others become atlases
        #[arg(long)]
        target: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a segmentation model on a dataset
    Train {
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory to create
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a target with a trained model
    Infer {
        /// Checkpoint directory from train
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted labelmap against a reference
    Eval {
        /// Predicted labelmap (.dlfv)
        #[arg(long)]
        pred: PathBuf,
        /// Reference labelmap (.dlfv)
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional directory for metrics.txt
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fusion model with parts disabled
    Ablate {
        /// Checkpoint directory; optional when wv and ft are both dropped
        #[arg(long)]
        model: Option<PathBuf>,
        /// Part to disable; repeat for several
        #[arg(long, value_enum)]
        drop: Vec<DropPart>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired t-test between two score lists (one number per line)
    Ttest {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

fn resolve_workers(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(n) = flag {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        return Ok(n);
    }
    match std::env::var("DLF_WORKERS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "DLF_WORKERS must be a positive integer, got {s:?}"
            ))),
        },
        Err(_) => Ok(1),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let workers = resolve_workers(cli.workers)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("cannot set up worker pool: {e}")))?;
    match cli.command {
        Command::Synth { config, out } => commands::synth(config.as_deref(), &out, workers),
        Command::Fuse {
            method,
            data,
            target,
            config,
            out,
        } => commands::fuse(method, &data, &target, config.as_deref(), &out, workers),
        Command::Train {
            model,
            data,
            config,
            out,
        } => commands::train(model, &data, config.as_deref(), &out, workers),
        Command::Infer {
            model,
            data,
            target,
            config,
            out,
        } => commands::infer(&model, &data, &target, config.as_deref(), &out, workers),
        Command::Eval {
            pred,
            reference,
            config,
            out,
        } => commands::eval(&pred, &reference, config.as_deref(), out.as_deref(), workers),
        Command::Ablate {
            model,
            drop,
            data,
            target,
            config,
            out,
        } => commands::ablate(
            model.as_deref(),
            &drop,
            &data,
            &target,
            config.as_deref(),
            &out,
            workers,
        ),
        Command::Ttest { a, b } => commands::ttest(&a, &b),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dlf: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}
