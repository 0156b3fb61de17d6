//! `avsep`: corpus generation, training, extraction, evaluation, ablation
//! and self-verification.
//!
//! Failures print a single line to stderr,
//! `error<TAB>code=<n><TAB>kind=<kind><TAB>msg=<text>`, and exit with
//! 2 (config), 3 (data), 4 (alignment), 5 (numeric) or 6 (verification).

mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

fn fail(code: u8, kind: &str, msg: &str) -> ExitCode {
    let msg = msg.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error\tcode={code}\tkind={kind}\tmsg={msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail(2, "usage", first.trim_start_matches("error: "));
        }
    };
    let result = match &cli.command {
        Command::Datagen(a) => commands::datagen(a),
        Command::Train(a) => commands::train(a),
        Command::Extract(a) => commands::extract(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.exit_code() as u8, e.kind(), &e.to_string()),
    }
}
