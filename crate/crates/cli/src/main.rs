//! `mvm`: simulate measure-valued martingales, solve the HJB problems on the
//! simplex and run the validation suites.

mod commands;
mod config;
mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] mvm_core::MvmError),
}

#[derive(Parser, Debug)]
#[command(name = "mvm", version, about = "Controlled measure-valued martingales")]
struct Cli {
    /// Worker threads for the solvers (0 = all cores).
    #[arg(long, global = true, env = "MVM_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// JSON report path; timing goes to the `.meta.json` sidecar.
    #[arg(long)]
    out: PathBuf,
    /// CSV plot data.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte-Carlo value of a cost under a constant control.
    Simulate(RunArgs),
    /// Stationary discounted HJB on the simplex grid.
    Solve(RunArgs),
    /// Root embedding value function.
    Root(RunArgs),
    /// Asian option with belief-jump controls.
    Asian(RunArgs),
    /// Two-player game with an informed player.
    Game(RunArgs),
    /// Acceptance criteria and closed-form suites.
    Validate {
        /// `all`, `A1`..`A11`, or a closed-form suite name.
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Solve(_) => "solve",
            Command::Root(_) => "root",
            Command::Asian(_) => "asian",
            Command::Game(_) => "game",
            Command::Validate { .. } => "validate",
        }
    }
}

fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    config::parse(&text)
}

fn execute(command: &Command) -> Result<u8, CliError> {
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64());
    let clock = Instant::now();
    let mut timings = Vec::new();
    let (out, cfg, output) = match command {
        Command::Validate { suite, out } => (out.clone(), None, commands::validate(suite, &mut timings)?),
        Command::Simulate(a) | Command::Solve(a) | Command::Root(a) | Command::Asian(a) | Command::Game(a) => {
            let cfg = load(&a.config)?;
            let csv = a.csv.as_deref();
            let output = match command {
                Command::Simulate(_) => commands::simulate(&cfg, csv)?,
                Command::Solve(_) => {
                    commands::solve(&cfg, &a.csv.clone().unwrap_or_else(|| commands::default_csv(&a.out)))?
                }
                Command::Root(_) => commands::root(&cfg, csv)?,
                Command::Asian(_) => commands::asian(&cfg, csv)?,
                _ => commands::game(&cfg, csv)?,
            };
            (Some(a.out.clone()), Some(cfg), output)
        }
    };
    if let Some(out) = out {
        let doc = report::document(command.name(), output.fields, cfg.as_ref(), output.records);
        report::write_json(&out, &doc)?;
        let meta = json!({
            "schema": report::SCHEMA,
            "command": command.name(),
            "started_unix_seconds": started,
            "runtime_seconds": clock.elapsed().as_secs_f64(),
            "threads": mvm_core::par::current_threads(),
            "parallel": mvm_core::par::is_parallel(),
            "criteria_runtime_seconds": timings.into_iter().map(|(k, v)| (k, report::float_or_null(v))).collect::<serde_json::Map<_, _>>(),
        });
        report::write_json(&report::meta_path(&out), &meta)?;
    }
    Ok(if output.passed { 0 } else { 1 })
}

/// Parses `argv` and runs the command. Exit codes: 0 success, 1 failed
/// validation, 2 usage or configuration error.
fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match mvm_core::par::with_threads(cli.threads, || execute(&cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("mvm: {e}");
            2
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
