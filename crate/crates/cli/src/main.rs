use std::process::ExitCode;

use clap::Parser;
use sceneflow_cli::{run, Cli};

fn main() -> ExitCode {
    run(Cli::parse())
}
