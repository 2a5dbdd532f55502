use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use comic_cli::args::Cli;
use comic_cli::commands;
use comic_core::Error;

fn hint(err: &Error) -> &'static str {
    match err {
        Error::Io { .. } => "check the path; `comic-kit synth` writes a ready-made dataset",
        Error::Config(_) => "fix the run config or the overriding flags; see --help",
        Error::Capacity(_) => "raise --base or --digits so base^digits covers the vocabulary",
        Error::Argument(_) | Error::Range(_) => "see --help for the expected arguments",
        Error::Numeric(_) => "lower the learning rate or resume from the last good checkpoint",
        Error::Format { .. } | Error::Json(_) => "the file is corrupt or was not written by comic-kit",
        _ => "",
    }
}

/// Last stderr line on failure: `error: kind=<kind> msg="<json string>"`.
fn error_line(kind: &str, msg: &str, hint: &str) -> String {
    let quote = |s: &str| serde_json::to_string(s).unwrap_or_else(|_| "\"\"".into());
    let mut line = format!("error: kind={kind} msg={}", quote(msg));
    if !hint.is_empty() {
        line.push_str(&format!(" hint={}", quote(hint)));
    }
    line
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", error_line("usage", &first, "run with --help for usage"));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string(), hint(&e)));
            match e {
                Error::Config(_) | Error::Argument(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
