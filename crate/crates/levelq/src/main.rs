//! Thin CLI over the library commands. Exit codes: 0 ok, 1 usage/config
//! error, 2 runtime error.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use levelq::cli;
use levelq::LqError;

#[derive(Parser)]
#[command(name = "levelq", version, about = "Iterative network quantization: train, quantize, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a float baseline network.
    Train(cli::TrainArgs),
    /// Quantize a trained baseline (slq, eslq or mlq).
    Quantize(cli::QuantizeArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(cli::EvalArgs),
    /// Dump the header and codebooks of an encoded model or checkpoint.
    Inspect(cli::InspectArgs),
    /// Summarize a finished quantization run directory.
    Report(cli::ReportArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version through the error path too.
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    let result = match &cli.command {
        Command::Train(args) => cli::cmd_train(args),
        Command::Quantize(args) => cli::cmd_quantize(args),
        Command::Eval(args) => cli::cmd_eval(args),
        Command::Inspect(args) => cli::cmd_inspect(args),
        Command::Report(args) => cli::cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, class) = match &e {
                LqError::Argument(_) | LqError::Config(_) => (1, "usage"),
                _ => (2, "runtime"),
            };
            eprintln!("error[{class}]: {e}");
            ExitCode::from(code)
        }
    }
}
