//! Command-line front end for the `wstoch-core` estimators.

pub mod args;
pub mod commands;
pub mod error;
pub mod experiments;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
pub use error::{CliError, CliResult};

pub fn dispatch(command: &Command) -> CliResult<()> {
    match command {
        Command::Estimate(a) => commands::cmd_estimate(a),
        Command::Mixture(a) => commands::cmd_mixture(a),
        Command::Barycenter(a) => commands::cmd_barycenter(a),
        Command::Experiment(a) => experiments::cmd_experiment(a),
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
