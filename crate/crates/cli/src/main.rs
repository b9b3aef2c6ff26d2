//! `txdeploy`: validate process files, run scenarios, explain traces.

mod explain;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "txdeploy", version, about = "Transactional deployment-process runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a process file.
    Validate {
        /// Process definition (.dproc)
        process: PathBuf,
    },
    /// Run a process against a world scenario and report consistency.
    Run(RunArgs),
    /// Render a trace file as a timeline.
    Explain {
        /// Trace file written by `run`
        trace: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MultiArg {
    /// All-or-nothing
    All,
    /// Best-effort
    Best,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Records,
}

#[derive(clap::Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub process: PathBuf,
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Driving-variable threshold for choosing a contingency
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Contingency attempts per activity
    #[arg(long)]
    pub max_attempts: Option<u32>,
    /// Multi-site policy; overrides the process's own
    #[arg(long, value_enum)]
    pub multi: Option<MultiArg>,
    /// Minimum success fraction under best-effort
    #[arg(long)]
    pub min_fraction: Option<f64>,
    /// Trace file; defaults to a file under $TXDEPLOY_TRACE_DIR (or the
    /// current directory)
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    #[arg(long, env = "TXDEPLOY_TRACE_DIR", hide_env_values = true)]
    pub trace_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub report: ReportFormat,
    /// Count partial success as success (exit 0)
    #[arg(long, overrides_with = "no_partial_ok")]
    pub partial_ok: bool,
    /// Exit 1 when a site ends with partial success
    #[arg(long, overrides_with = "partial_ok")]
    pub no_partial_ok: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { process } => run::validate(&process),
        Command::Run(args) => run::run(&args),
        Command::Explain { trace } => explain::command(&trace),
    };
    ExitCode::from(code)
}
