//! `mtlfsl`: command-line front end for the estimator.
//!
//! Exit codes: 0 success, 1 internal error, 2 bad input, 3 a reported solve
//! hit the iteration limit (outputs are still written).

mod args;
mod commands;
mod config;
mod exit;
mod manifest;
mod model;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = args::Cli::parse();
    match commands::run(cli) {
        Ok(outcome) => outcome.code(),
        Err(err) => {
            eprintln!("error: {err:#}");
            exit::error_code(&err)
        }
    }
}
