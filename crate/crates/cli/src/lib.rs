//! The `panda` command line.

pub mod commands;
pub mod config;
pub mod dataset;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

/// Failure of a command. Input errors exit with 2, internal ones with 1.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        use std::io::ErrorKind::*;
        let msg = format!("{}: {e}", path.display());
        match e.kind() {
            NotFound | PermissionDenied | InvalidData | InvalidInput | UnexpectedEof | AlreadyExists
            | NotADirectory | IsADirectory => CliError::Input(msg),
            _ => CliError::Internal(msg),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<panda_core::Error> for CliError {
    fn from(e: panda_core::Error) -> Self {
        use panda_core::Error as E;
        match e {
            E::Numeric(_) => CliError::Internal(e.to_string()),
            E::Io(io) => CliError::io(Path::new("<stream>"), io),
            other => CliError::Input(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "panda", version, about = "LiDAR/camera panoptic segmentation domain adaptation at desk scale")]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for generation and training (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "panda-out")]
    pub out: PathBuf,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a source split and a shifted target split.
    Gen {
        /// Frames per split.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train on the source split only.
    Pretrain(DataArgs),
    /// Pretrain (or load a checkpoint) and adapt to the target split.
    Adapt {
        #[command(flatten)]
        data: DataArgs,
        /// Adaptation iterations (default: epochs over the target split).
        #[arg(long)]
        iterations: Option<usize>,
        /// Start from this checkpoint's student instead of pretraining.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Panoptic metrics of a checkpoint on a split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// `source` or `target`
        #[arg(long, default_value = "target")]
        split: String,
        /// Score ground truth against itself instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Write the refined pseudo-labels of one frame.
    Refine {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Frame id as listed in the split manifest, e.g. `000003`
        #[arg(long)]
        frame: String,
        /// `source` or `target`
        #[arg(long, default_value = "target")]
        split: String,
    },
    /// Color every point of a frame by error type and write an ASCII PLY.
    ExportErrormap {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Frame id as listed in the split manifest, e.g. `000003`
        #[arg(long)]
        frame: String,
        /// `source` or `target`
        #[arg(long, default_value = "target")]
        split: String,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use the student instead of the teacher parameters.
    #[arg(long)]
    pub student: bool,
}

/// Effective configuration: defaults, then the file, then `--set`, then `--seed`.
pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::parse(&std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply(o)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<String, CliError> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Gen { frames } => {
            if let Some(n) = frames {
                cfg.frames = *n;
            }
            commands::gen(&cfg, &cli.out)
        }
        Command::Pretrain(d) => commands::pretrain(&cfg, &d.data, &cli.out),
        Command::Adapt { data, iterations, init } => {
            if iterations.is_some() {
                cfg.train.iterations = *iterations;
            }
            commands::adapt(&cfg, &data.data, init.as_deref(), &cli.out)
        }
        Command::Eval { data, model, split, oracle } => {
            commands::eval(&cfg, &data.data, split, model, *oracle, &cli.out)
        }
        Command::Refine { data, model, frame, split } => {
            commands::refine(&cfg, &data.data, split, frame, model, &cli.out)
        }
        Command::ExportErrormap { data, model, frame, split } => {
            commands::export_errormap(&cfg, &data.data, split, frame, model, &cli.out)
        }
    }
}
