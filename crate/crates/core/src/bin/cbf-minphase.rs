use std::process::ExitCode;

use clap::Parser;

use cbf_minphase::cli::{dispatch, Cli};

fn main() -> ExitCode {
    ExitCode::from(dispatch(&Cli::parse()))
}
