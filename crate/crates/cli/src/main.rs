mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::Cli;

/// Failure classes, each with its own exit code and stderr tag.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or values: exit 2.
    Usage(String),
    /// A required input path does not exist: exit 2.
    MissingInput(String),
    /// Anything that fails while running: exit 1.
    Runtime(anyhow::Error),
}

impl CliError {
    fn tag(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::MissingInput(_) => "missing-input",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::MissingInput(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::MissingInput(m) => m.clone(),
            CliError::Runtime(e) => format!("{e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

fn report(err: &CliError) {
    let msg = err.message().replace('\n', " ");
    eprintln!("quantcal: error[{}]: {}", err.tag(), msg.trim());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            let first = rendered
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            let err = CliError::Usage(first.to_string());
            report(&err);
            for line in rendered.lines().skip(1).filter(|l| !l.trim().is_empty()) {
                eprintln!("  {line}");
            }
            return ExitCode::from(err.code());
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            report(&err);
            ExitCode::from(err.code())
        }
    }
}
