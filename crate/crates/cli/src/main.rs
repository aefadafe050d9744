//! `mlta`: file-based front end to the estimation pipeline.

mod args;
mod commands;
mod error;
mod run;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::error::CliError;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(error::EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.message);
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot set up worker pool: {e}")))?;
    }
    match &cli.command {
        Command::Ingest(a) => commands::ingest(cli, a),
        Command::Simulate(a) => commands::simulate(cli, a),
        Command::Fit(a) => commands::fit(cli, a),
        Command::Select(a) => commands::select(cli, a),
        Command::Bootstrap(a) => commands::bootstrap(cli, a),
        Command::Predict(a) => commands::predict(cli, a),
    }
}
