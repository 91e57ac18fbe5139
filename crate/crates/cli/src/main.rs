use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use optstop_cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // help and version requests are not errors
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = run(&cli);
    match &result {
        Ok(outcome) => {
            // a closed pipe on stdout is not our failure
            let mut out = std::io::stdout().lock();
            for line in &outcome.lines {
                if writeln!(out, "{line}").is_err() {
                    break;
                }
            }
        }
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(exit_code(&result))
}
