//! `gait`: dataset generation, training, translation and KID evaluation.
//!
//! Exit codes: 0 success, 1 bad input or configuration, 2 numerical failure
//! (non-finite values, failed gradient check).

mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use commands::NumericalFailure;

#[derive(Parser, Debug)]
#[command(name = "gait", version, about = "Cycle-consistent translation with gradient adjustment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic S/T dataset as PNGs plus a manifest.
    MakeDataset(commands::MakeDatasetArgs),
    /// Train both generators and discriminators.
    Train(commands::TrainArgs),
    /// Translate a folder of PNGs with a trained generator.
    Translate(commands::TranslateArgs),
    /// KID between two image folders.
    EvalKid(commands::EvalKidArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(commands::GradcheckArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        e.downcast_ref::<NumericalFailure>().is_some()
            || e.downcast_ref::<gait_core::Error>().is_some_and(|e| e.is_numerical())
    });
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match &cli.command {
        Command::MakeDataset(a) => commands::make_dataset(a),
        Command::Train(a) => commands::train(a),
        Command::Translate(a) => commands::translate(a),
        Command::EvalKid(a) => commands::eval_kid(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
