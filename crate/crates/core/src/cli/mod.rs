//! Command-line front end: configuration, checkpoints and subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{MetricKind, Objective};
use commands::{AblationKind, SelectSource};
use config::TaskName;

#[derive(Debug, Parser)]
#[command(name = "deepctrl", version, about = "Rule-strength controllable neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the fully resolved configuration.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print the defaults for a task instead.
        #[arg(long)]
        task: Option<TaskName>,
    },
    /// Generate a synthetic dataset as CSV.
    GenData {
        #[arg(long)]
        task: TaskName,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Take generator settings from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Classification mix: source, target, target1, target2 or target3.
        #[arg(long)]
        mix: Option<String>,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one or more seeds, then sweep alpha and select an operating point.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// First training seed (overrides train.seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Output directory (overrides output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over the alpha grid on val and test.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grid from -0.2 to 1.4 instead of 0 to 1.
        #[arg(long)]
        extended: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select alpha on validation rows and report the test row.
    Select {
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        sweep: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `min-error` or `min-error-vr=<threshold>`.
        #[arg(long, default_value = "min-error")]
        objective: Objective,
        /// Metric recorded in the sweep CSV: mae, cross_entropy or accuracy.
        #[arg(long, default_value = "mae")]
        metric: String,
    },
    /// Train variants along one ablation axis.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// beta, coupling, lambda or rho-policy.
        #[arg(long)]
        kind: AblationKind,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_metric(s: &str) -> Result<MetricKind> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::config("metric", format!("unknown metric `{s}`")))
}

fn open_out(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

/// Runs one parsed command, printing results to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { config, task } => print!("{}", commands::cmd_config(config.as_deref(), task)?),
        Command::GenData { task, seed, config, mix, out } => {
            let mut w = open_out(out.as_ref())?;
            commands::cmd_gen_data(task, seed, config.as_deref(), mix.as_deref(), &mut w)?;
            w.flush()?;
        }
        Command::Train { config, seed, seeds, out } => {
            println!("{}", commands::cmd_train(&config, seed, seeds, out.as_deref())?)
        }
        Command::Sweep { checkpoint, extended, out } => {
            let mut w = open_out(out.as_ref())?;
            commands::cmd_sweep(&checkpoint, extended, &mut w)?;
            w.flush()?;
        }
        Command::Select { sweep, checkpoint, objective, metric } => {
            let source = match (&sweep, &checkpoint) {
                (Some(path), _) => SelectSource::SweepCsv { path, metric: parse_metric(&metric)? },
                (None, Some(path)) => SelectSource::Checkpoint(path),
                (None, None) => return Err(Error::config("sweep", "pass --sweep or --checkpoint")),
            };
            println!("{}", commands::cmd_select(source, objective)?);
        }
        Command::Ablate { config, kind, seeds, out } => {
            println!("{}", commands::cmd_ablate(&config, kind, seeds, out.as_deref())?)
        }
    }
    Ok(())
}
