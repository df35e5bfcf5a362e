//! `rdcontrol`: runs reaction-diffusion control scenarios from TOML files.

mod artifacts;
mod config;
mod run;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Overrides;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn message(&self) -> String {
        match self {
            CliError::Validation(m) | CliError::Io(m) | CliError::Other(m) => m.clone(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) | CliError::Other(_) => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "rdcontrol", version, about = "Controllability scenarios for linear reaction-diffusion systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Output directory (default: `output` from the config, else `out/<config stem>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Highest propagated spectral mode.
    #[arg(long)]
    modes: Option<usize>,
    /// Control time intervals per steering phase.
    #[arg(long)]
    steps: Option<usize>,
    /// Seed for randomly generated data.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            modes: self.modes,
            steps: self.steps,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every task of a scenario.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Rerun a scenario once per value of one parameter.
    Sweep {
        config: PathBuf,
        /// Dotted path (`tasks.0.tau`, `numerics.modes`) or a task key such as `tau`.
        #[arg(long)]
        param: String,
        /// Comma-separated values; an empty list runs nothing.
        #[arg(long, allow_hyphen_values = true, default_value = "")]
        values: String,
        #[command(flatten)]
        common: Common,
    },
}

fn default_out(config: &std::path::Path, cfg_out: Option<&str>) -> PathBuf {
    if let Some(o) = cfg_out {
        return PathBuf::from(o);
    }
    let stem = config.file_stem().map_or("scenario".into(), |s| s.to_string_lossy().into_owned());
    PathBuf::from("out").join(stem)
}

fn dispatch(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Run { config, common } => {
            let ov = common.overrides();
            let (cfg, text) = config::load(&config, &ov)?;
            let out = common.out.clone().unwrap_or_else(|| default_out(&config, cfg.output.as_deref()));
            let manifest = run::run_scenario(&cfg, &text, &out, &ov)?;
            for t in &manifest.tasks {
                println!("{:<20} {:<16} {}", t.kind, t.status.label(), t.message);
            }
            println!("artifacts in {}", out.display());
            Ok(manifest.exit_code)
        }
        Command::Sweep { config, param, values, common } => {
            let ov = common.overrides();
            let text = std::fs::read_to_string(&config)
                .map_err(|e| CliError::Io(format!("cannot read {}: {e}", config.display())))?;
            let origin = config.display().to_string();
            let base = config::from_text(&text, &origin, &ov)?;
            let out = common.out.clone().unwrap_or_else(|| default_out(&config, base.output.as_deref()));
            let values = sweep::parse_values(&values)?;
            let summary = sweep::run_sweep(&text, &origin, &param, &values, &out, &ov)?;
            for row in &summary.rows {
                println!("{} = {:<12} exit {}", param, row.value, row.exit_code);
            }
            println!("{} sweep points in {}", summary.rows.len(), out.display());
            Ok(summary.exit_code)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("rdcontrol: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
