use std::process::ExitCode;

use clap::Parser;
use supportbench_cli::{main_with, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    // Panics are bugs, not validation failures.
    match std::panic::catch_unwind(|| main_with(cli)) {
        Ok(code) => code,
        Err(_) => ExitCode::from(supportbench_cli::Status::InternalError as u8),
    }
}
