//! Command dispatch for the `voxformer` binary.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use voxformer_core::{Error as CoreError, ExperimentConfig, Seeds};

pub mod commands;
pub mod svg;

#[derive(Debug, Parser)]
#[command(name = "voxformer", version, about = "Volumetric transformer experiments on synthetic phantoms")]
pub struct Cli {
    /// JSON experiment config; defaults apply to anything it omits.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dotted override such as `pretrain.epochs=10`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory; overrides the config's `output`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Sets every seed (data, init, mask, folds) to this value.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write the synthetic phantom dataset.
    Generate,
    /// Multi-task pretraining of the encoder.
    Pretrain,
    /// Token-selection fine-tuning on the class task.
    Finetune,
    /// Per-layer logistic probe on frozen features.
    Probe,
    /// Cross-validated feature/behavior association, with and without age control.
    Associate,
    /// Selection frequency per token from a fine-tuning run.
    SelectStats,
    /// Summary table and plots from everything under the output directory.
    Report,
}

/// A problem with the user's input rather than with the computation.
#[derive(Debug)]
pub struct UserError(pub String);

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

/// Resolved configuration and output root for one invocation.
#[derive(Clone, Debug)]
pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let out = PathBuf::from(&cfg.output);
        Context { cfg, out }
    }

    pub fn from_cli(cli: &Cli) -> anyhow::Result<Self> {
        let mut sets = cli.set.clone();
        if let Some(out) = &cli.out {
            sets.push(format!("output={}", serde_json::to_string(&out.to_string_lossy())?));
        }
        let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &sets)?;
        if let Some(seed) = cli.seed {
            cfg.seeds = Seeds::all(seed);
        }
        Ok(Context::new(cfg))
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let ctx = Context::from_cli(cli)?;
    match cli.command {
        Command::Generate => commands::generate(&ctx).map(drop),
        Command::Pretrain => commands::pretrain(&ctx).map(drop),
        Command::Finetune => commands::finetune(&ctx).map(drop),
        Command::Probe => commands::probe(&ctx).map(drop),
        Command::Associate => commands::associate(&ctx).map(drop),
        Command::SelectStats => commands::select_stats(&ctx).map(drop),
        Command::Report => commands::report(&ctx),
    }
}

/// 1 for bad input (config, missing files, refused settings), 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UserError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<CoreError>() {
        Some(
            CoreError::Config { .. }
            | CoreError::InvalidArgument { .. }
            | CoreError::NothingToOptimize(_)
            | CoreError::ParamShape { .. }
            | CoreError::CorruptCheckpoint { .. }
            | CoreError::Json(_),
        ) => 1,
        Some(CoreError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 1,
        _ => 2,
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
