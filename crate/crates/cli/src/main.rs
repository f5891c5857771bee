//! `semrec`: generate data, quantize, retrieve, train, evaluate, benchmark
//! and analyze, one stage directory per command.

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use error::CliError;
use run::Workspace;

#[derive(Parser)]
#[command(name = "semrec", version, about = "Semantic-id lifelong interest modeling pipeline")]
struct Cli {
    /// TOML experiment configuration (defaults apply when omitted).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Workspace holding one directory per stage.
    #[arg(short, long, global = true, default_value = "runs")]
    workdir: PathBuf,

    /// Override a config value by dotted key, e.g. `--set training.batch_size=128`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted-signal synthetic corpus.
    Synth,
    /// Train residual codebooks and assign semantic ids.
    Quantize,
    /// Inverted-index operations.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Calibrate the similarity range and retrieve behaviors for eval impressions.
    Retrieve,
    /// Train the ranker.
    Train,
    /// Evaluate the trained checkpoint.
    Eval,
    /// Time soft and hard retrieval.
    Bench,
    /// Analyses of labels, groupings and learned representations.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// Run every stage in order.
    Pipeline {
        /// Skip the timing benchmark.
        #[arg(long)]
        no_bench: bool,
    },
    /// Print the resolved configuration as TOML.
    Config,
}

#[derive(Subcommand)]
enum IndexAction {
    /// Build per-user inverted indexes on top-level codes.
    Build,
}

#[derive(Subcommand)]
enum Analysis {
    /// Mutual information between clustered interest vectors and labels.
    Mi,
    /// Information gain of semantic-id versus similarity-bucket groupings.
    Gain,
    /// Within-bucket CTR dispersion across semantic-id groups.
    Dispersion,
    /// Eval GAUC as a function of the bucket count.
    Sweep,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let ws = Workspace::new(cli.workdir);
    match cli.command {
        Command::Synth => commands::synth(&ws, &cfg),
        Command::Quantize => commands::quantize_cmd(&ws, &cfg),
        Command::Index {
            action: IndexAction::Build,
        } => commands::index_build(&ws, &cfg),
        Command::Retrieve => commands::retrieve(&ws, &cfg),
        Command::Train => commands::train(&ws, &cfg),
        Command::Eval => commands::eval(&ws, &cfg),
        Command::Bench => commands::bench(&ws, &cfg),
        Command::Analyze { what } => match what {
            Analysis::Mi => commands::analyze_mi(&ws, &cfg),
            Analysis::Gain => commands::analyze_gain(&ws, &cfg),
            Analysis::Dispersion => commands::analyze_dispersion(&ws, &cfg),
            Analysis::Sweep => commands::analyze_sweep(&ws, &cfg),
        },
        Command::Pipeline { no_bench } => {
            if cfg.corpus.path.is_none() {
                commands::synth(&ws, &cfg)?;
            }
            commands::quantize_cmd(&ws, &cfg)?;
            commands::index_build(&ws, &cfg)?;
            commands::retrieve(&ws, &cfg)?;
            commands::train(&ws, &cfg)?;
            commands::eval(&ws, &cfg)?;
            if !no_bench {
                commands::bench(&ws, &cfg)?;
            }
            commands::analyze_gain(&ws, &cfg)?;
            commands::analyze_dispersion(&ws, &cfg)?;
            commands::analyze_mi(&ws, &cfg)?;
            commands::analyze_sweep(&ws, &cfg)
        }
        Command::Config => {
            print!("{}", toml::to_string(&cfg).map_err(|e| CliError::Usage(e.to_string()))?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
