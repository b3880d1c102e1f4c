use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fimsel::{Algorithm, BuiltinExample};

mod commands;
mod output;

/// Budgeted measurement selection for vehicle tracking.
#[derive(Debug, Parser)]
#[command(name = "fimsel", version, about)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Master seed; defaults to the scenario's `seed`, or 0 for builtins.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "FIMSEL_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads, 0 for one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Select measurements and write selection.csv.
    Select(SelectArgs),
    /// Monte-Carlo estimation error versus budget.
    Sweep(SweepArgs),
    /// Expand a builtin example and write its selections and plot data.
    Demo(DemoArgs),
    /// Exhaustive optimum; same as `select --algorithm oracle`.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Scenario TOML file, or `builtin:<tag>`.
    pub config: String,
    /// Budget for every agent; defaults to the budgets in the scenario.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, default_value = "greedy")]
    pub algorithm: Algorithm,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Scenario TOML file, or `builtin:<tag>`.
    pub config: String,
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Scenario TOML file, or `builtin:<tag>`.
    pub config: String,
    /// Comma-separated budgets.
    #[arg(long, value_delimiter = ',', required = true)]
    pub budgets: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// Comma-separated selectors.
    #[arg(long, value_delimiter = ',', default_value = "greedy,random")]
    pub selectors: Vec<Algorithm>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// example1, example2, example3 or cooperative.
    pub tag: BuiltinExample,
    /// Monte-Carlo trials for the error curve.
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
}

#[derive(Debug)]
pub enum CliError {
    Core(fimsel::Error),
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io { path: path.to_owned(), source }
    }

    fn exit_code(&self) -> u8 {
        use fimsel::Error as E;
        match self {
            CliError::Core(E::Config(_)) => 2,
            CliError::Core(E::OracleGuard { .. }) => 4,
            CliError::Core(_) => 3,
            CliError::Io { .. } => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl From<fimsel::Error> for CliError {
    fn from(e: fimsel::Error) -> Self {
        CliError::Core(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.global.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Select(args) => commands::select(&cli.global, &args, "select"),
        Command::Oracle(args) => {
            let args = SelectArgs { config: args.config, budget: args.budget, algorithm: Algorithm::Oracle };
            commands::select(&cli.global, &args, "oracle")
        }
        Command::Sweep(args) => commands::sweep(&cli.global, &args),
        Command::Demo(args) => commands::demo(&cli.global, &args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fimsel: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
