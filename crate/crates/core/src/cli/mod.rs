//! Command-line front end.
//!
//! Every command takes `--config`; outputs go to the configured directory
//! unless `--out` is given. Failures print one JSON object on stderr and exit
//! with a code that identifies the class of error.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use commands::Session;
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "ghostplan", version, about = "Plan, simulate and route ghost projections")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, overriding `output.directory`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Monte Carlo seed, overriding `noise.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo runs, overriding `noise.runs`.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Suppress progress lines on stdout.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured master mask(s) as pixel files.
    SynthMask(Common),
    /// Transmission statistics and radial spectrum of the master mask(s).
    MaskStats(Common),
    /// Write the normalized target image.
    MakeTarget(Common),
    /// Solve for exposure weights.
    Plan(Common),
    /// Monte Carlo noise on the saved plan.
    Simulate(Common),
    /// Closed-form noise predictions for the saved plan.
    Predict(Common),
    /// Order the plan's offsets for the stage and estimate durations.
    Route(Common),
    /// Consolidate plan, simulation and route into one table row.
    Report(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::SynthMask(c)
            | Command::MaskStats(c)
            | Command::MakeTarget(c)
            | Command::Plan(c)
            | Command::Simulate(c)
            | Command::Predict(c)
            | Command::Route(c)
            | Command::Report(c) => c,
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 3,
        Error::Io(_) | Error::Format(_) | Error::Json(_) => 4,
        Error::Capacity { .. } => 5,
        Error::NotConverged { .. } => 6,
        Error::Precondition(_) => 7,
        Error::Argument(_)
        | Error::Domain(_)
        | Error::Range(_)
        | Error::Shape { .. }
        | Error::Divisibility { .. }
        | Error::Undefined(_) => 8,
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

pub fn error_json(e: &Error) -> String {
    let r = ErrorReport { error: e.kind(), message: e.to_string(), exit_code: exit_code(e) };
    serde_json::to_string(&r).expect("error report serializes")
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("GHOSTPLAN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("GHOSTPLAN_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let c = cli.command.common();
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.noise.seed = seed;
    }
    if let Some(runs) = c.runs {
        cfg.noise.runs = runs;
    }
    if let Some(out) = &c.out {
        cfg.output.directory = out.clone();
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output.directory)?;
    let session = Session { out: cfg.output.directory.clone(), cfg, quiet: c.quiet };
    match cli.command {
        Command::SynthMask(_) => commands::synth_mask(&session),
        Command::MaskStats(_) => commands::cmd_mask_stats(&session),
        Command::MakeTarget(_) => commands::make_target(&session),
        Command::Plan(_) => commands::cmd_plan(&session),
        Command::Simulate(_) => commands::cmd_simulate(&session),
        Command::Predict(_) => commands::cmd_predict(&session),
        Command::Route(_) => commands::cmd_route(&session),
        Command::Report(_) => commands::cmd_report(&session),
    }
}
