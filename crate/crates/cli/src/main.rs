use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Online distillation of a streaming object detector against a simulated
/// oracle.
///
/// Every command reads one TOML config; flags override file values. Exit
/// status: 0 on success, 1 for configuration errors, 2 for runtime errors.
#[derive(Debug, Parser)]
#[command(name = "tkd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic stream from `scenes` and write it as a trace.
    Generate(Common),
    /// Run the configured pipeline mode and write the report as JSON.
    Run(Common),
    /// Sweep the empty-cell blend factor and write a comparison table.
    Ablate(Common),
    /// Time the distillation losses against the number of targets.
    Bench(Common),
    /// Re-score an existing run report against the configured stream.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Report written by `tkd run`.
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `trace` (replay instead of generating).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Overrides `output.path`. Tables are written as CSV for `.csv`, JSON
    /// for `.json`, aligned text otherwise.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Overrides any config value, e.g. `--set pipeline.distill.lambda=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl Common {
    fn load(&self) -> Result<config::RunConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        if let Some(trace) = &self.trace {
            overrides.push(("trace".into(), format!("{:?}", trace.display().to_string())));
        }
        if let Some(out) = &self.out {
            overrides.push(("output.path".into(), format!("{:?}", out.display().to_string())));
        }
        config::load(&self.config, &overrides)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<tkd_core::Error> for CliError {
    fn from(e: tkd_core::Error) -> Self {
        match e {
            tkd_core::Error::Config { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(c) => c.load().and_then(|cfg| commands::generate(&cfg)),
        Command::Run(c) => c.load().and_then(|cfg| commands::run(&cfg)),
        Command::Ablate(c) => c.load().and_then(|cfg| commands::ablate(&cfg)),
        Command::Bench(c) => c.load().and_then(|cfg| commands::bench(&cfg)),
        Command::Eval { common, report } => common.load().and_then(|cfg| commands::eval(&cfg, report)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tkd: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
