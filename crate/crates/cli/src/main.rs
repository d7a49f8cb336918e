//! `sfpca` command-line tool.

mod commands;
mod config;
mod plots;

use std::process::ExitCode;

use clap::Parser;

use config::Cli;

/// Finished with convergence warnings.
pub const EXIT_WARN: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
