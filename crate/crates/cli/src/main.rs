//! `tracediag`: simulate incidents, train pruning trees, and diagnose.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Config, CONFIG_ENV};

#[derive(Debug, Parser)]
#[command(name = "tracediag", version, about = "Trace-based root cause analysis")]
struct Cli {
    /// Config file (toml, or json by extension).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic incident cases and sampled span files.
    Simulate(SimulateArgs),
    /// Build an incident case from a span jsonl file.
    Aggregate(AggregateArgs),
    /// Dump per-component indicators of a case as json.
    Indicators(IndicatorsArgs),
    /// Train a pruning policy on a directory of cases.
    Train(TrainArgs),
    /// Apply a filtering tree to a case and write the pruned case.
    Prune(PruneArgs),
    /// Rank root-cause candidates of one case.
    Diagnose(DiagnoseArgs),
    /// Diagnose every case in a directory and score against the labels.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of cases; overrides `simulate.cases`.
    #[arg(long)]
    pub cases: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(long)]
    pub spans: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Base window as `START:END` in ms.
    #[arg(long)]
    pub base: String,
    /// Alert window as `START:END` in ms.
    #[arg(long)]
    pub alert: String,
    #[arg(long, default_value = "case")]
    pub case_id: String,
    /// Labelled root cause; repeatable.
    #[arg(long = "root-cause")]
    pub root_causes: Vec<String>,
}

#[derive(Debug, Args)]
pub struct IndicatorsArgs {
    #[arg(long)]
    pub case: PathBuf,
    /// Writes to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = tracediag_core::indicators::DEFAULT_K_SIGMA)]
    pub k_sigma: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of case json files.
    #[arg(long)]
    pub cases: PathBuf,
    /// Output directory for policy.json, tree.json and train_log.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.episodes`.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Continue from the policy already in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long, required_unless_present = "no_prune", conflicts_with = "no_prune")]
    pub tree: Option<PathBuf>,
    /// Run attribution on the full graph.
    #[arg(long)]
    pub no_prune: bool,
    /// Report json; the text rendering goes next to it with a `.txt` extension.
    #[arg(long)]
    pub out: PathBuf,
    /// Ranked entries shown in the text rendering.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub cases: PathBuf,
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let run = || {
        let cfg = Config::load(cli.config.as_deref())?.with_seed(cli.seed);
        match &cli.command {
            Command::Simulate(a) => commands::simulate(&cfg, a),
            Command::Aggregate(a) => commands::aggregate(&cfg, a, cli.seed.unwrap_or(0)),
            Command::Indicators(a) => commands::indicators(a),
            Command::Train(a) => commands::train(&cfg, a),
            Command::Prune(a) => commands::prune(a),
            Command::Diagnose(a) => commands::diagnose(&cfg, a),
            Command::Evaluate(a) => commands::evaluate(&cfg, a),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
