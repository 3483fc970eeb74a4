mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "commute", version, about = "Day-to-day commuter simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write its run log and exports under --out.
    Run(RunArgs),
    /// Print the analytic equilibrium for a scenario.
    Benchmark(BenchmarkArgs),
    /// Interval tables, gap series and convergence verdict for a run log.
    Report(ReportArgs),
    /// Run an LLM scenario in record mode, optionally against a scripted mock endpoint.
    RecordCassette(RecordArgs),
    /// Print a scenario with every default filled in.
    ExportScenario(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// Scenario JSON file.
    #[arg(long, conflicts_with = "builtin")]
    pub scenario: Option<PathBuf>,
    /// Bundled scenario: bottleneck_40 or two_route_40.
    #[arg(long)]
    pub builtin: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    Heuristic,
    Replay,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Live,
    Record,
    Replay,
}

fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

/// Flags that override scenario fields; all are recorded in the run log.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub days: Option<u32>,
    #[arg(long)]
    pub agents: Option<usize>,
    /// Decision-phase worker threads.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyKind>,
    /// Decision script for the replay policy.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub gateway_mode: Option<ModeArg>,
    #[arg(long)]
    pub cassette: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_name = "on|off", value_parser = parse_switch)]
    pub cot: Option<bool>,
    #[arg(long, value_name = "on|off", value_parser = parse_switch)]
    pub tom: Option<bool>,
    #[arg(long, value_name = "on|off", value_parser = parse_switch)]
    pub bounded_rationality: Option<bool>,
    #[arg(long, value_name = "on|off", value_parser = parse_switch)]
    pub self_correction: Option<bool>,
    /// Any other field, as POINTER=JSON (e.g. /persona/inertia_band=0).
    #[arg(long = "set", value_name = "POINTER=JSON")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Continue an interrupted run log in --out instead of starting over.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also run the iterated best-response oracle (bottleneck only).
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value_t = 0.5)]
    pub grid_step: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub runlog: PathBuf,
    /// Benchmark file from `commute benchmark`; computed from the run's scenario when absent.
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub group_days: u32,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RecordArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Cassette to write.
    #[arg(long = "to")]
    pub to: PathBuf,
    /// Serve replies from this mock script instead of the configured endpoint.
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    /// Start from an empty cassette instead of reusing recorded exchanges.
    #[arg(long)]
    pub fresh: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => commands::run(a),
        Command::Benchmark(a) => commands::benchmark(a),
        Command::Report(a) => commands::report(a),
        Command::RecordCassette(a) => commands::record(a),
        Command::ExportScenario(a) => commands::export_scenario(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
