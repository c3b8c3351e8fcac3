mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use debut::DebutError;

use args::{Cli, Command};
use commands::Diverged;

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Validate(a) => commands::validate(a),
        Command::Apply(a) => commands::apply(a),
        Command::Fit(a) => commands::fit(a),
        Command::Bench(a) => commands::bench(a),
        Command::Init(a) => commands::init(a),
        Command::Expand(a) => commands::expand(a),
        Command::RandomTensor(a) => commands::random_tensor(a),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Diverged>().is_some() {
        return EXIT_NUMERICAL;
    }
    match err.downcast_ref::<DebutError>() {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}
