use std::process::ExitCode;

use clap::Parser;
use hetgpt_cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hetgpt: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
