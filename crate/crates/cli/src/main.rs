use std::process::ExitCode;

use clap::Parser;
use dinozaur_cli::Cli;

fn main() -> ExitCode {
    match dinozaur_cli::run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
