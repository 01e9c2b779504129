//! The `tod` command line.
//!
//! Exit codes: 0 success, 1 evaluation mismatch, 2 input error, 3 backend
//! error.

pub mod args;
pub mod commands;
pub mod manifest;

use std::fmt;

use args::{Cli, Command};
use manifest::Manifest;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn mismatch(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }

    pub fn input(error: anyhow::Error) -> Self {
        Self { code: 2, error }
    }

    pub fn backend(error: anyhow::Error) -> Self {
        Self { code: 3, error }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn run(cli: &Cli, argv: Vec<String>) -> CliResult<()> {
    let name = match &cli.command {
        Command::Ingest(_) => "ingest",
        Command::BuildStore(_) => "build-store",
        Command::Run(_) => "run",
        Command::Sweep(_) => "sweep",
        Command::Evaluate(_) => "evaluate",
        Command::Serve(_) => "serve",
    };
    let mut m = Manifest::new(name, argv);
    match &cli.command {
        Command::Ingest(a) => commands::ingest(a, &mut m),
        Command::BuildStore(a) => commands::build_store_cmd(a, &mut m),
        Command::Run(a) => commands::run(a, &mut m),
        Command::Sweep(a) => commands::sweep(a, &mut m),
        Command::Evaluate(a) => commands::evaluate_cmd(a, &mut m),
        Command::Serve(a) => commands::serve(a, &mut m),
    }
}
