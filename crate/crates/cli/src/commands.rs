//! Subcommand bodies. Each writes its artifacts under the output directory
//! and returns the lines printed to stdout.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use optstop_core::lattice::{dense, smallest_optimal_rule, snell_envelope_with, ChainApprox};
use optstop_core::montecarlo::{
    evaluate_rule_with, fit_lsmc, longstaff_schwartz_out_of_sample, longstaff_schwartz_with,
    LsmcOptions, RuleSource, ValueEstimate, CSV_HEADER,
};
use optstop_core::pde::{
    extract_continuation_region, solve_variational_inequality, viscosity_residual_report,
    write_boundary_csv, write_plot_csv, write_surface_csv, Grid, PdeSurface, ResidualReport,
    SolverConfig,
};
use optstop_core::scalar::format_f64;
use optstop_core::sde::{simulate_with, PathBundle};
use optstop_core::Execution;

use crate::config::{Format, ProblemSpec, RunConfig, SolverSpec};
use crate::error::CliError;
use crate::suites::{self, SuiteReport};

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub format: Format,
    pub exec: Execution,
}

/// What a subcommand reports back: stdout lines and whether every check held.
#[derive(Debug, Default)]
pub struct Outcome {
    pub lines: Vec<String>,
    pub ok: bool,
}

impl Outcome {
    fn ok(lines: Vec<String>) -> Self {
        Outcome { lines, ok: true }
    }
}

impl Context {
    fn create(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", self.out.display())))?;
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut w = self.create(name)?;
        let text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
        writeln!(w, "{text}")?;
        w.flush()?;
        Ok(self.out.join(name))
    }
}

fn written(path: &Path) -> String {
    format!("wrote {}", path.display())
}

fn grid_for(spec: &SolverSpec, prob: &ProblemSpec) -> Result<Grid, CliError> {
    let p = &prob.problem;
    let d = p.dim();
    if spec.n_space.len() != d {
        return Err(CliError::Config(format!(
            "solver.n_space has {} entries, d = {d}",
            spec.n_space.len()
        )));
    }
    let grid = match (&spec.lo, &spec.hi) {
        (Some(lo), Some(hi)) => Grid::new(
            lo.clone(),
            hi.clone(),
            spec.n_space.clone(),
            prob.t0,
            p.horizon(),
            spec.n_time,
            spec.boundary,
        )?,
        (None, None) => Grid::centered(
            p,
            prob.t0,
            &prob.x0,
            spec.width,
            spec.n_space.clone(),
            spec.n_time,
            spec.boundary,
        )?,
        _ => {
            return Err(CliError::Config(
                "give both solver.lo and solver.hi, or neither".into(),
            ))
        }
    };
    Ok(grid)
}

fn solver_config(spec: &SolverSpec, exec: Execution) -> SolverConfig {
    SolverConfig {
        scheme: spec.scheme,
        theta: spec.theta,
        tol: spec.tol,
        max_iter: spec.max_iter,
        omega: spec.omega,
        rannacher_steps: spec.rannacher_steps,
        exec,
    }
}

fn pde_solve(ctx: &Context, prob: &ProblemSpec) -> Result<(PdeSurface, SolverSpec), CliError> {
    let spec = ctx.cfg.solver(prob.problem.dim())?;
    let grid = grid_for(&spec, prob)?;
    let surface =
        solve_variational_inequality(&prob.problem, &grid, &solver_config(&spec, ctx.exec))?;
    Ok((surface, spec))
}

fn pde_value(surface: &PdeSurface, x0: &[f64]) -> Result<f64, CliError> {
    surface
        .value_at(0, x0)
        .ok_or_else(|| CliError::Config("problem.x0 lies outside the solver box".into()))
}

#[derive(Serialize)]
struct SolveSummary<'a> {
    value_at_x0: f64,
    x0: &'a [f64],
    t0: f64,
    residual: &'a ResidualReport,
    iterations_total: usize,
}

pub fn solve(ctx: &Context) -> Result<Outcome, CliError> {
    let prob = ctx.cfg.problem()?;
    let (surface, spec) = pde_solve(ctx, &prob)?;
    let value = pde_value(&surface, &prob.x0)?;
    let report = viscosity_residual_report(&surface, &prob.problem)?;
    let region = extract_continuation_region(&surface, spec.epsilon);

    let mut w = ctx.create("surface.csv")?;
    write_surface_csv(&surface, &mut w)?;
    w.flush()?;
    let mut w = ctx.create("plot_value.csv")?;
    write_plot_csv(&surface, 0, &mut w)?;
    w.flush()?;
    let mut w = ctx.create("boundary.csv")?;
    write_boundary_csv(&surface, &region, &mut w)?;
    w.flush()?;
    let report_path = ctx.write_json("residual_report.json", &report)?;

    let mut lines = vec![
        format!("v(t0, x0) = {}", format_f64(value)),
        format!(
            "complementarity_max = {}",
            format_f64(report.complementarity_max)
        ),
    ];
    if !region.oscillating_layers.is_empty() {
        lines.push(format!(
            "warning: free boundary oscillates on {} layers",
            region.oscillating_layers.len()
        ));
    }
    let summary = SolveSummary {
        value_at_x0: value,
        x0: &prob.x0,
        t0: prob.t0,
        residual: &report,
        iterations_total: surface.iterations.iter().sum(),
    };
    let summary_path = match ctx.format {
        Format::Json => ctx.write_json("solve_summary.json", &summary)?,
        Format::Csv => {
            let mut w = ctx.create("solve_summary.csv")?;
            writeln!(w, "value_at_x0,terminal_gap,obstacle_violation,interior_pde_residual_on_continuation,complementarity_max,iterations_total")?;
            writeln!(
                w,
                "{},{},{},{},{},{}",
                format_f64(value),
                format_f64(report.terminal_gap),
                format_f64(report.obstacle_violation),
                format_f64(report.interior_pde_residual_on_continuation),
                format_f64(report.complementarity_max),
                summary.iterations_total
            )?;
            w.flush()?;
            ctx.out.join("solve_summary.csv")
        }
    };
    lines.push(written(&ctx.out.join("surface.csv")));
    lines.push(written(&report_path));
    lines.push(written(&summary_path));
    Ok(Outcome::ok(lines))
}

pub fn tree(ctx: &Context) -> Result<Outcome, CliError> {
    let prob = ctx.cfg.problem()?;
    let spec = ctx.cfg.lattice(prob.problem.dim())?;
    let chain = ChainApprox::build(&prob.problem, prob.t0, &prob.x0, spec.n_steps, spec.scheme)?;
    let surface = snell_envelope_with(&chain, &prob.problem, ctx.exec);
    if surface.values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CliError::Numerical(
            "non-finite value on the lattice".into(),
        ));
    }
    let rule = smallest_optimal_rule(&surface, None);
    let mut w = ctx.create("tree.csv")?;
    surface.write_csv(&chain, &rule, &mut w)?;
    w.flush()?;
    Ok(Outcome::ok(vec![
        format!("v(t0, x0) = {}", format_f64(*surface.root())),
        format!(
            "stop fraction at t0 = {}",
            format_f64(rule.stop_fraction(0))
        ),
        written(&ctx.out.join("tree.csv")),
    ]))
}

fn bundle(ctx: &Context, prob: &ProblemSpec, seed: u64) -> Result<PathBundle, CliError> {
    let mc = ctx.cfg.mc()?;
    Ok(simulate_with(
        &prob.problem,
        prob.t0,
        &prob.x0,
        mc.n_steps,
        mc.n_paths,
        seed,
        ctx.exec,
    )?)
}

pub fn simulate(ctx: &Context) -> Result<Outcome, CliError> {
    let prob = ctx.cfg.problem()?;
    let mc = ctx.cfg.mc()?;
    let b = bundle(ctx, &prob, mc.seed)?;
    let mut w = ctx.create("paths.csv")?;
    b.write_csv(&mut w)?;
    w.flush()?;
    Ok(Outcome::ok(vec![
        format!(
            "{} paths, {} steps, seed {}",
            b.n_paths,
            b.n_steps(),
            b.seed
        ),
        written(&ctx.out.join("paths.csv")),
    ]))
}

/// Regression estimate; out of sample on a second bundle seeded `seed + 1`.
fn lsmc(ctx: &Context, prob: &ProblemSpec, train: &PathBundle) -> Result<ValueEstimate, CliError> {
    let mc = ctx.cfg.mc()?;
    let opts = LsmcOptions {
        in_the_money_only: mc.in_the_money_only,
        exec: ctx.exec,
        ..LsmcOptions::new(mc.degree)
    };
    if mc.out_of_sample {
        let test = bundle(ctx, prob, mc.seed.wrapping_add(1))?;
        Ok(longstaff_schwartz_out_of_sample(
            &prob.problem,
            train,
            &test,
            &opts,
        )?)
    } else {
        // fit once to surface conditioning errors before pricing
        fit_lsmc(&prob.problem, train, &opts)?;
        Ok(longstaff_schwartz_with(&prob.problem, train, &opts)?)
    }
}

fn write_estimates(ctx: &Context, stem: &str, rows: &[ValueEstimate]) -> Result<PathBuf, CliError> {
    match ctx.format {
        Format::Json => ctx.write_json(&format!("{stem}.json"), &rows),
        Format::Csv => {
            let name = format!("{stem}.csv");
            let mut w = ctx.create(&name)?;
            writeln!(w, "{CSV_HEADER}")?;
            for r in rows {
                writeln!(w, "{}", r.csv_row())?;
            }
            w.flush()?;
            Ok(ctx.out.join(name))
        }
    }
}

fn exact(method: &str, value: f64) -> ValueEstimate {
    ValueEstimate {
        method: method.to_string(),
        mean: value,
        std_error: 0.0,
        n_paths: 0,
        seed: 0,
        offgrid_fraction: 0.0,
    }
}

fn estimate_line(e: &ValueEstimate) -> String {
    if e.n_paths == 0 {
        format!("{:<20} {}", e.method, format_f64(e.mean))
    } else {
        format!(
            "{:<20} {} +- {}",
            e.method,
            format_f64(e.mean),
            format_f64(e.std_error)
        )
    }
}

pub fn price(ctx: &Context) -> Result<Outcome, CliError> {
    let prob = ctx.cfg.problem()?;
    let mc = ctx.cfg.mc()?;
    let (surface, spec) = pde_solve(ctx, &prob)?;
    let pde = exact("pde", pde_value(&surface, &prob.x0)?);
    let paths = bundle(ctx, &prob, mc.seed)?;
    let rule = evaluate_rule_with(
        &prob.problem,
        &paths,
        RuleSource::Pde(&surface),
        spec.epsilon,
        ctx.exec,
    )?;
    let ls = lsmc(ctx, &prob, &paths)?;
    let rows = vec![pde, rule, ls];
    let path = write_estimates(ctx, "price", &rows)?;
    let mut lines: Vec<String> = rows.iter().map(estimate_line).collect();
    lines.push(written(&path));
    Ok(Outcome::ok(lines))
}

pub fn compare(ctx: &Context) -> Result<Outcome, CliError> {
    let prob = ctx.cfg.problem()?;
    let mc = ctx.cfg.mc()?;
    let (surface, _) = pde_solve(ctx, &prob)?;
    let pde = exact("pde", pde_value(&surface, &prob.x0)?);
    let spec = ctx.cfg.lattice(prob.problem.dim())?;
    let lattice = if prob.problem.dim() == 1 {
        let r = dense::root_value_with(
            &prob.problem,
            prob.t0,
            prob.x0[0],
            spec.n_steps,
            spec.scheme,
            ctx.exec,
        )?;
        r.root
    } else {
        let chain =
            ChainApprox::build(&prob.problem, prob.t0, &prob.x0, spec.n_steps, spec.scheme)?;
        *snell_envelope_with(&chain, &prob.problem, ctx.exec).root()
    };
    if !lattice.is_finite() {
        return Err(CliError::Numerical("non-finite lattice value".into()));
    }
    let lattice = exact("lattice", lattice);
    let paths = bundle(ctx, &prob, mc.seed)?;
    let ls = lsmc(ctx, &prob, &paths)?;
    let rows = vec![pde, lattice, ls];
    let path = write_estimates(ctx, "compare", &rows)?;
    let mut lines: Vec<String> = rows.iter().map(estimate_line).collect();
    let base = rows[0].mean;
    for r in &rows[1..] {
        let rel = (r.mean - base).abs() / base.abs().max(f64::MIN_POSITIVE);
        lines.push(format!(
            "{} vs pde: relative difference {}",
            r.method,
            format_f64(rel)
        ));
    }
    lines.push(written(&path));
    Ok(Outcome::ok(lines))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Dpp,
    KeyEquality,
    SmallestOptimal,
    Approx,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::Dpp => "dpp",
            Suite::KeyEquality => "key-equality",
            Suite::SmallestOptimal => "smallest-optimal",
            Suite::Approx => "approx",
        }
    }
}

pub fn run_suite(ctx: &Context, suite: Suite) -> Result<SuiteReport, CliError> {
    let spec = ctx.cfg.verify()?;
    match suite {
        Suite::Dpp => suites::dpp(&spec),
        Suite::KeyEquality => suites::key_equality(&spec),
        Suite::SmallestOptimal => suites::smallest_optimal(&spec),
        Suite::Approx => suites::approx(&spec),
    }
}

pub fn verify(ctx: &Context, suite: Suite) -> Result<Outcome, CliError> {
    let report = run_suite(ctx, suite)?;
    let path = ctx.write_json(&format!("verify_{}.json", suite.name()), &report)?;
    let mut lines = vec![report.line()];
    lines.extend(
        report
            .failures
            .iter()
            .take(10)
            .map(|f| format!("  failed: {f}")),
    );
    lines.push(written(&path));
    Ok(Outcome {
        lines,
        ok: report.ok(),
    })
}
