use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    ExitCode::from(gmpg_cli::run(gmpg_cli::Cli::parse()))
}
