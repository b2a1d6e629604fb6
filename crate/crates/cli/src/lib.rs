//! Command-line driver: dataset generation, the two training phases, the
//! ablation suite, λ2 sweeps and checkpoint evaluation.

pub mod commands;
pub mod config;
pub mod records;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::{ConfigError, ConfigMap, Emit, RunConfig};
pub use records::{Kind, MetricsRecord};

#[derive(Debug, Parser)]
#[command(name = "scl", version, about = "Supervised contrastive text-to-image GAN toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    Generate(CommonArgs),
    /// Contrastively pre-train the text and image encoders.
    Pretrain(CommonArgs),
    /// Train the conditional GAN against frozen encoders.
    Gan(CommonArgs),
    /// Run the five-row ablation suite.
    Ablate(CommonArgs),
    /// Score a generator checkpoint on the test split.
    Eval(CommonArgs),
    /// One GAN run per value of `lambda2_list`.
    Sweep(CommonArgs),
}

#[derive(Debug, Clone, Args, Default)]
pub struct CommonArgs {
    /// Key-value config file.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config key; may be repeated.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub emit: Option<String>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("training aborted: {0}")]
    Train(#[from] scl_core::trainer::TrainError),
    #[error("data error: {0}")]
    Data(#[from] scl_core::data::DataError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] scl_core::models::CheckpointError),
    #[error("output error: {0}")]
    Records(#[from] records::RecordError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for usage and configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl CommonArgs {
    /// File values, then `--set` overrides, then the dedicated flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut map = match &self.config {
            Some(path) => ConfigMap::load(path)?,
            None => ConfigMap::default(),
        };
        map.apply_overrides(&self.set)?;
        let flags = [
            ("dataset", self.dataset.as_ref().map(|p| p.display().to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("seed", self.seed.map(|s| s.to_string())),
            ("emit", self.emit.clone()),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                map.insert(key, &v, &format!("--{key}"), 0)?;
            }
        }
        Ok(RunConfig::from_map(&map)?)
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing results to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn std::io::Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.render().to_string()))?;
    dispatch(&cli.command, stdout)
}

pub fn dispatch(command: &Command, stdout: &mut dyn std::io::Write) -> Result<(), CliError> {
    match command {
        Command::Generate(a) => commands::generate(&a.resolve()?, stdout),
        Command::Pretrain(a) => commands::pretrain(&a.resolve()?, stdout),
        Command::Gan(a) => commands::gan(&a.resolve()?, stdout),
        Command::Ablate(a) => commands::ablate(&a.resolve()?, stdout),
        Command::Eval(a) => commands::eval(&a.resolve()?, stdout),
        Command::Sweep(a) => commands::sweep(&a.resolve()?, stdout),
    }
}

/// Entry point used by the binary.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let mut out = std::io::stdout().lock();
    match dispatch(&cli.command, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
