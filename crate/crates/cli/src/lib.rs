//! `cmps-lab`: config in, results out. One command per process.
//!
//! Exit codes: 0 success, 1 validation error, 2 numerical failure.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use cmps_core::CmpsError;

pub const TOOL: &str = "cmps-lab";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const THREADS_ENV: &str = "CMPS_LAB_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Validation(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<CmpsError> for CliError {
    fn from(e: CmpsError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Steady,
    Gap,
    Correlate,
    G2,
    Kinetic,
    LlEnergy,
    Discretize,
    Converge,
    Trajectories,
    LindbladCheck,
    ZfunctionalCheck,
    FamilyDeriv,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Steady => "steady",
            Command::Gap => "gap",
            Command::Correlate => "correlate",
            Command::G2 => "g2",
            Command::Kinetic => "kinetic",
            Command::LlEnergy => "ll-energy",
            Command::Discretize => "discretize",
            Command::Converge => "converge",
            Command::Trajectories => "trajectories",
            Command::LindbladCheck => "lindblad-check",
            Command::ZfunctionalCheck => "zfunctional-check",
            Command::FamilyDeriv => "family-deriv",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cmps-lab", version, about = "Continuous matrix product state engine")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// Run configuration (JSON), or a previous result file.
    #[arg(long)]
    pub config: PathBuf,
    /// Result file; `.csv` selects the grid format where available.
    #[arg(long)]
    pub output: PathBuf,
    /// Worker threads, 0 = all cores. Falls back to CMPS_LAB_THREADS.
    #[arg(long)]
    pub threads: Option<usize>,
    /// JSON object overriding numerical tolerances.
    #[arg(long)]
    pub tolerance_overrides: Option<PathBuf>,
}

fn thread_count(cli: &Cli) -> Result<usize, CliError> {
    if let Some(n) = cli.threads {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| {
            CliError::Validation(format!("{THREADS_ENV}={v:?} is not a thread count"))
        }),
        Err(_) => Ok(0),
    }
}

fn read(path: &PathBuf, what: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {what} {}: {e}", path.display())))
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let threads = thread_count(cli)?;
    let mut cfg = config::RunConfig::parse(&read(&cli.config, "config")?)?;
    if let Some(path) = &cli.tolerance_overrides {
        let over = config::parse_tolerances(&read(path, "tolerance overrides")?)?;
        cfg.tolerances = Some(cfg.tolerances.unwrap_or_default().merged(&over));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    let out = pool.install(|| commands::dispatch(cli.command, &cfg))?;
    output::write(&cli.output, cli.command, &out)
}

/// Parse arguments, run, report to stderr, return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{TOOL} {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
