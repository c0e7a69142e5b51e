//! Command-line front end for the `bibq_core` pipeline.
//!
//! Exit codes: 0 on success (a layer whose threshold could not be met is a
//! result, not an error), 1 when some layers failed, 2 for input or
//! configuration errors.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;

pub use args::{Cli, Command, RunArgs};
pub use commands::{
    cmd_efficiency, cmd_oracle, cmd_reconstruct, cmd_stats, cmd_sweep, cmd_synth, EfficiencyInput, OracleReport,
    SweepSummary,
};
pub use config::RunConfig;
pub use error::{CliError, Result};

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(jobs);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker threads: {e}")))?;
    // Reports are buffered so the worker pool never touches the caller's writer.
    let mut buffer = Vec::new();
    let result = pool.install(|| run_command(cli, &mut buffer));
    let _ = out.write_all(&buffer);
    result
}

fn run_command(cli: &Cli, out: &mut Vec<u8>) -> Result<()> {
    match &cli.command {
        Command::Stats(args) => cmd_stats(&args.apply(base_config(cli)?)?, out).map(drop),
        Command::Sweep(args) => cmd_sweep(&args.apply(base_config(cli)?)?, out).map(drop),
        Command::Oracle { run, eta } => cmd_oracle(&run.apply(base_config(cli)?)?, *eta, out).map(drop),
        Command::Efficiency { bits, scheme } => {
            let input = if !scheme.is_empty() {
                EfficiencyInput::Schemes(scheme.clone())
            } else if !bits.is_empty() {
                EfficiencyInput::Bits(bits.clone())
            } else {
                EfficiencyInput::Table
            };
            cmd_efficiency(&input, out).map(drop)
        }
        Command::Reconstruct { run, schemes } => {
            cmd_reconstruct(&run.apply(base_config(cli)?)?, schemes, out).map(drop)
        }
        Command::Synth { out: dir, samples, seed } => cmd_synth(dir, *samples, *seed, out).map(drop),
        Command::Config(args) => {
            let cfg = args.apply(base_config(cli)?)?;
            let _ = out.write_all(cfg.to_text().as_bytes());
            Ok(())
        }
    }
}
