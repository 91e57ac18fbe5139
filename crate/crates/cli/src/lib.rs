//! Command-line front end for `optstop-core`: configuration, subcommands and
//! report files.

pub mod commands;
pub mod config;
pub mod error;
pub mod suites;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use optstop_core::Execution;

use commands::{Context, Outcome, Suite};
use config::{Format, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "optstop",
    version,
    about = "Finite-horizon optimal stopping: PDE, lattice, Monte Carlo and exact checks"
)]
pub struct Cli {
    /// INI run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one entry, e.g. `--set solver.n_time=400`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (default `output.dir`, else `out`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for both `mc.seed` and `verify.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the obstacle problem; writes the surface, residual report and free boundary.
    Solve,
    /// Backward induction on a recombining lattice; writes the rule per node.
    Tree,
    /// Euler-Maruyama paths.
    Simulate,
    /// PDE value, its stopping rule on fresh paths, and regression Monte Carlo.
    Price,
    /// Exhaustive checks on finite filtered spaces and exact chains.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
        /// Number of random spaces (`verify.spaces`).
        #[arg(long)]
        spaces: Option<usize>,
    },
    /// PDE against lattice against Monte Carlo.
    Compare,
}

fn context(cli: &Cli) -> Result<Context, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("mc", "seed", &seed.to_string())?;
        cfg.set("verify", "seed", &seed.to_string())?;
    }
    if let Command::Verify {
        spaces: Some(n), ..
    } = cli.command
    {
        cfg.set("verify", "spaces", &n.to_string())?;
    }
    let output = cfg.output()?;
    Ok(Context {
        out: cli.out.clone().unwrap_or(output.dir),
        format: cli.format.unwrap_or(output.format),
        cfg,
        exec: Execution::default(),
    })
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let ctx = context(cli)?;
    match cli.command {
        Command::Solve => commands::solve(&ctx),
        Command::Tree => commands::tree(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::Price => commands::price(&ctx),
        Command::Verify { suite, .. } => commands::verify(&ctx, suite),
        Command::Compare => commands::compare(&ctx),
    }
}

/// Exit code contract: 0 success, 1 a check failed, 2 usage or config, 3 numerical.
pub fn exit_code(result: &Result<Outcome, CliError>) -> u8 {
    match result {
        Ok(o) if o.ok => 0,
        Ok(_) => 1,
        Err(e) => e.exit_code(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let ok = Ok(Outcome {
            lines: vec![],
            ok: true,
        });
        let failed = Ok(Outcome {
            lines: vec![],
            ok: false,
        });
        assert_eq!(exit_code(&ok), 0);
        assert_eq!(exit_code(&failed), 1);
        assert_eq!(exit_code(&Err(CliError::Usage("x".into()))), 2);
        assert_eq!(exit_code(&Err(CliError::Config("x".into()))), 2);
        assert_eq!(exit_code(&Err(CliError::Numerical("x".into()))), 3);
    }

    #[test]
    fn failed_suite_maps_to_exit_1() {
        let report = suites::SuiteReport {
            suite: "dpp".into(),
            passed: 3,
            total: 4,
            summary: String::new(),
            failures: vec!["draw 2".into()],
        };
        assert!(!report.ok());
        assert_eq!(report.line(), "dpp: 3/4 ");
    }

    #[test]
    fn seed_flag_overrides_both_sections() {
        let cli =
            Cli::try_parse_from(["optstop", "verify", "dpp", "--seed", "42", "--spaces", "3"])
                .unwrap();
        let ctx = context(&cli).unwrap();
        assert_eq!(ctx.cfg.mc().unwrap().seed, 42);
        assert_eq!(ctx.cfg.verify().unwrap().seed, 42);
        assert_eq!(ctx.cfg.verify().unwrap().spaces, 3);
        assert_eq!(ctx.out, PathBuf::from("out"));
    }
}
