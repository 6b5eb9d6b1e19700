//! `insertgen`: train, decode, sample, infill, evaluate and self-check
//! insertion-based sequence models.

mod commands;
mod config_file;

use std::process::ExitCode;

use clap::Parser;

use insertion_core::Error;

/// Exit codes shared by every command.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 2;
    pub const NUMERIC: u8 = 3;
    pub const LENGTH: u8 = 4;
    pub const ORACLE: u8 = 5;
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::NonFiniteLoss { .. } => exit::NUMERIC,
        Error::Length { .. } | Error::SizeLimit { .. } => exit::LENGTH,
        _ => exit::CONFIG,
    }
}

fn main() -> ExitCode {
    let threads = std::env::var("KERMIT_THREADS").ok().and_then(|v| v.trim().parse().ok());
    insertion_core::exec::init_threads(threads);

    let argv = match config_file::expand_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit::CONFIG);
        }
    };
    let cli = match commands::Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CONFIG } else { exit::OK });
        }
    };
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
