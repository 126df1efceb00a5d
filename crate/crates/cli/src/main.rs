//! `neundiff` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 I/O or malformed
//! input file, 3 internal error.

mod args;
mod commands;

use std::panic;
use std::process::ExitCode;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use commands::Options;

/// A usage error detected after argument parsing.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<neundiff::Error>() {
            return match e {
                neundiff::Error::Io { .. }
                | neundiff::Error::Format { .. }
                | neundiff::Error::Parse { .. } => 2,
                neundiff::Error::Validation(_) | neundiff::Error::Degenerate(_) => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
        if cause.is::<Usage>() || cause.is::<serde_json::Error>() {
            return 1;
        }
    }
    3
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Usage("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let opts = Options {
        timing: cli.timing,
        verbose: cli.verbose,
    };
    match cli.command {
        Command::Diffuse(a) => commands::diffuse(a, &opts),
        Command::Detect(a) => commands::detect(a, &opts),
        Command::Eval(a) => commands::eval(a, &opts),
        Command::Density(a) => commands::density(a, &opts),
        Command::Synth(a) => commands::synth(a, &opts),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(3),
    }
}
