use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    ndpp_cli::run(ndpp_cli::Cli::parse())
}
