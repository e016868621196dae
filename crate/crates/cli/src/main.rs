//! `cast`: command-line front end for the trajectory pipeline.
//!
//! Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or
//! configuration error.

mod args;
mod commands;
mod util;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::util::UsageError;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.downcast_ref::<UsageError>().is_some() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate(a) => commands::simulate::run(&a),
        Command::Fit(a) => commands::fit::run(&a),
        Command::Trajectory(a) => commands::trajectory::run(&a),
        Command::Refute(a) => commands::refute::run(&a),
        Command::Explain(a) => commands::explain::run(&a),
        Command::RunAll(a) => commands::run_all::run(&a),
    }
}
