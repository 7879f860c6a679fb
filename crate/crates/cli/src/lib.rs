//! The `expertlab` command-line front end.
//!
//! [`run`] parses arguments (after splicing in an optional JSON config
//! file), dispatches to a subcommand and maps failures to exit codes; see
//! [`exit`] for the codes and the error line format.

pub mod args;
pub mod commands;
pub mod config;
pub mod exit;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;
use expertlab::Workers;

use args::{Cli, Command};
use exit::Failure;

fn dispatch(cli: &Cli) -> commands::CmdResult {
    let workers = Workers::new(cli.workers as usize);
    match &cli.command {
        Command::GenModel(a) => commands::gen_model(a),
        Command::GenDomain(a) => commands::gen_domain(a),
        Command::Trace(a) => commands::trace(a, workers),
        Command::Convert(a) => commands::convert(a),
        Command::Score(a) => commands::score(a, workers),
        Command::Plan(a) => commands::plan(a),
        Command::Apply(a) => commands::apply(a),
        Command::Overlap(a) => commands::overlap(a),
        Command::Perturb(a) => commands::perturb(a, workers),
        Command::Audit(a) => commands::audit(a, workers),
        Command::Report(a) => commands::report(a),
    }
}

/// `None` when help or version text was requested and printed.
fn parse(argv: Vec<OsString>) -> Result<Option<Cli>, Failure> {
    let argv = config::expand(argv)?;
    match Cli::try_parse_from(argv) {
        Ok(cli) => Ok(Some(cli)),
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            Ok(None)
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let msg = first.strip_prefix("error: ").unwrap_or(first).to_string();
            eprint!("{text}");
            Err(Failure::usage(msg))
        }
    }
}

/// Runs one command line and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let result = parse(argv).and_then(|cli| cli.map_or(Ok(()), |cli| dispatch(&cli)));
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", f.line());
            f.kind.code()
        }
    }
}
