//! Command-line front end for `rmi-core`.
//!
//! [`run`] parses arguments and executes one subcommand, returning the exit
//! code and the text for standard output and error. The `rmi` binary is a
//! thin wrapper around it.

pub mod args;
pub mod commands;

use std::ffi::OsString;

use clap::Parser;
use rmi_core::Error;

use args::{Cli, Command};

pub const EXIT_OK: u8 = 0;
pub const EXIT_PROPERTY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_SHAPE: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Output {
    pub code: u8,
    pub stdout: String,
    pub stderr: String,
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ShapeMismatch { .. }
        | Error::ClassOutOfRange { .. }
        | Error::FactorTooLarge { .. }
        | Error::RegionTooLarge { .. }
        | Error::EmptyDistribution { .. }
        | Error::DimTooLarge(_) => EXIT_SHAPE,
        Error::NotPositiveDefinite { .. }
        | Error::NonFinite(_)
        | Error::DivergenceDetected { .. }
        | Error::TooFewSamples(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

pub fn run<I, T>(argv: I) -> Output
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            let code = e.exit_code() as u8;
            return if code == 0 {
                Output { code, stdout: text, stderr: String::new() }
            } else {
                Output { code: EXIT_USAGE, stdout: String::new(), stderr: text }
            };
        }
    };
    let result = match &cli.command {
        Command::Loss(a) => commands::loss(a),
        Command::Gradcheck(a) => commands::gradcheck_cmd(a),
        Command::Oracle(a) => commands::oracle(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(out) => {
            let mut stdout = String::new();
            for l in &out.lines {
                stdout.push_str(l);
                stdout.push('\n');
            }
            Output { code: if out.passed { EXIT_OK } else { EXIT_PROPERTY }, stdout, stderr: String::new() }
        }
        Err(e) => Output { code: exit_code(&e), stdout: String::new(), stderr: format!("error: {e}\n") },
    }
}
