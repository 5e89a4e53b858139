//! `promptfuse` command-line entry point.
//!
//! Exit status: 0 on success, 1 for user errors (bad configs, paths or
//! files), 2 for internal failures.

mod args;
mod commands;
mod plot;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;

/// A failure caused by the invocation rather than by the program.
#[derive(Debug)]
pub struct UserError(String);

impl UserError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn is_user_error(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        cause.is::<UserError>()
            || cause
                .downcast_ref::<promptfuse::Error>()
                .is_some_and(promptfuse::Error::is_user_error)
    })
}

fn main() -> ExitCode {
    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_user_error(&err) { 1 } else { 2 })
        }
    }
}
