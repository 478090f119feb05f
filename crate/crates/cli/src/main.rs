//! `neuralmerger` command-line front end.

mod cmd;
mod config;
mod data;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "neuralmerger", version, about = "Merge trained CNNs into one model with shared codebooks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a dense model from scratch.
    TrainBaseline(cmd::train::TrainArgs),
    /// Merge two or more trained models.
    Merge(cmd::merge::MergeArgs),
    /// Calibrate a merged model against its originals.
    Finetune(cmd::finetune::FinetuneArgs),
    /// Report accuracy, and the drop against a reference model.
    Eval(cmd::eval::EvalArgs),
    /// Time merged inference against the original models.
    Bench(cmd::bench::BenchArgs),
    /// Print the structure and metadata of a model file.
    Inspect(cmd::inspect::InspectArgs),
}

const THREADS_VAR: &str = "NEURALMERGER_THREADS";

fn init_threads(command: &Command) -> anyhow::Result<()> {
    let threads = match std::env::var(THREADS_VAR) {
        Ok(v) => Some(
            v.parse::<usize>()
                .map_err(|_| anyhow::anyhow!("{THREADS_VAR} must be a positive integer, got `{v}`"))?,
        ),
        // Timings are taken on one worker unless asked otherwise.
        Err(_) if matches!(command, Command::Bench(_)) => Some(1),
        Err(_) => None,
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads(&cli.command)?;
    match cli.command {
        Command::TrainBaseline(a) => cmd::train::run(a),
        Command::Merge(a) => cmd::merge::run(a),
        Command::Finetune(a) => cmd::finetune::run(a),
        Command::Eval(a) => cmd::eval::run(a),
        Command::Bench(a) => cmd::bench::run(a),
        Command::Inspect(a) => cmd::inspect::run(a),
    }
}

/// 2 for numeric divergence, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .any(|e| e.downcast_ref::<neuralmerger::Error>().is_some_and(neuralmerger::Error::is_numeric));
    if numeric {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = err.chain().map(ToString::to_string).collect::<Vec<_>>().join(": ");
            eprintln!("error: {}", line.replace('\n', " "));
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divergence_maps_to_two() {
        let err = anyhow::Error::new(neuralmerger::Error::Divergence { epoch: 3, loss: f64::NAN });
        assert_eq!(exit_code(&err), 2);
        assert_eq!(exit_code(&err.context("calibrating")), 2);
        let err = anyhow::Error::new(neuralmerger::Error::Config("bad".into()));
        assert_eq!(exit_code(&err), 1);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
