//! Command-line front end for the `bivlgm` library.

pub mod args;
pub mod commands;
pub mod compare;
pub mod suites;

use args::{Cli, Command};
use commands::CliResult;

/// Runs one parsed command, returning its stdout text.
pub fn run(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::SinkhornBench(a) => commands::sinkhorn(a),
        Command::MatchDemo(a) => commands::matching(a),
        Command::Prompt(a) => commands::prompt(a),
        Command::TrainSynthetic(a) => commands::train_synthetic(a),
        Command::CompareContrastive(a) => commands::compare_contrastive(a),
        Command::Eval(a) => commands::eval(a),
    }
}
