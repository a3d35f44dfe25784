use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ket_cli::commands;
use ket_cli::config::{Overrides, RunConfig};
use ket_cli::pipeline::Split;
use ket_cli::CliError;

#[derive(Parser)]
#[command(
    name = "ket",
    version,
    about = "Knowledge-enriched transformer for emotion detection in conversations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Independent runs with seeds seed, seed+1, ...; the summary
        /// reports each run and the mean best validation metric.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        repeats: u64,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on one split and print the report as JSON.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Classify every utterance of a JSONL input (labels optional).
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the per-token concept attention table for one utterance.
    InspectKnowledge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// The utterance whose tokens are audited.
        #[arg(long)]
        utterance: String,
        /// Preceding utterances, oldest first; repeat the flag per turn.
        #[arg(long)]
        context: Vec<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the finite-difference gradient suite on a tiny built-in config.
    Gradcheck {
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Test hook: corrupt one analytic gradient so the check must fail.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_overrides(overrides);
    let problems = cfg.validate();
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(CliError::Config(problems))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            repeats,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            commands::cmd_train(&cfg, repeats as usize)
        }
        Command::Evaluate {
            config,
            checkpoint,
            split,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            commands::cmd_evaluate(&cfg, &checkpoint, split)
        }
        Command::Predict {
            config,
            checkpoint,
            input,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            commands::cmd_predict(&cfg, &checkpoint, &input)
        }
        Command::InspectKnowledge {
            config,
            checkpoint,
            utterance,
            context,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            commands::cmd_inspect_knowledge(&cfg, &checkpoint, &utterance, &context)
        }
        Command::Gradcheck {
            seed,
            corrupt_backward,
        } => commands::cmd_gradcheck(seed, corrupt_backward),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            err.report();
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
