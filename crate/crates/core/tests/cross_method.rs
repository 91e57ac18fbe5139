//! PDE, lattice and Monte Carlo against each other and against closed forms
//! computed here.

use optstop_core::lattice::{dense, snell_envelope, snell_envelope_with, ChainApprox, Scheme};
use optstop_core::montecarlo::{evaluate_rule, longstaff_schwartz, RuleSource};
use optstop_core::pde::{
    solve_variational_inequality, BoundaryMode, Grid, PdeScheme, SolverConfig,
};
use optstop_core::sde::simulate;
use optstop_core::{Execution, ModelKind, ScalarFn, StoppingProblem};

fn gbm_put(mu: f64) -> StoppingProblem {
    let g = ScalarFn::parse("max(100 - x, 0)").unwrap();
    StoppingProblem::preset(
        ModelKind::Gbm { mu, nu: 0.2 },
        1,
        1.0,
        ScalarFn::Const(0.0),
        g,
    )
    .unwrap()
}

fn pi() -> SolverConfig {
    SolverConfig {
        scheme: PdeScheme::PolicyIteration,
        ..Default::default()
    }
}

fn put_pde(p: &StoppingProblem, n_space: usize, n_time: usize) -> f64 {
    let grid = Grid::new(
        vec![0.0],
        vec![400.0],
        vec![n_space],
        0.0,
        1.0,
        n_time,
        BoundaryMode::DirichletG,
    )
    .unwrap();
    solve_variational_inequality(p, &grid, &pi())
        .unwrap()
        .value_at(0, &[100.0])
        .unwrap()
}

#[test]
fn convex_gain_never_stops_early() {
    // driftless, f = 0, g = e^x convex: continuing to T is optimal, so
    // v(0, 0) = E[e^{W_1}] = e^{1/2}
    let exact = 0.5f64.exp();
    let p = StoppingProblem::preset(
        ModelKind::Bachelier { mu: 0.0, s: 1.0 },
        1,
        1.0,
        ScalarFn::Const(0.0),
        ScalarFn::parse("exp(x)").unwrap(),
    )
    .unwrap();
    let grid = Grid::new(
        vec![-8.0],
        vec![8.0],
        vec![641],
        0.0,
        1.0,
        200,
        BoundaryMode::LinearExtrapolation,
    )
    .unwrap();
    let pde = solve_variational_inequality(&p, &grid, &pi())
        .unwrap()
        .value_at(0, &[0.0])
        .unwrap();
    assert!((pde - exact).abs() < 2e-3 * exact, "pde {pde} vs {exact}");

    let chain = ChainApprox::build(&p, 0.0, &[0.0], 400, Scheme::Trinomial).unwrap();
    let lattice = *snell_envelope(&chain, &p).root();
    assert!(
        (lattice - exact).abs() < 2e-3 * exact,
        "lattice {lattice} vs {exact}"
    );

    let paths = simulate(&p, 0.0, &[0.0], 50, 40_000, 17).unwrap();
    let terminal = evaluate_rule(&p, &paths, RuleSource::Terminal, 0.0).unwrap();
    assert!(
        (terminal.mean - exact).abs() < 4.0 * terminal.std_error,
        "{terminal:?}"
    );
}

#[test]
fn regression_recovers_convex_values() {
    // polynomial bases hold x^2 + (T - t) exactly; for (x)^+ the value is
    // E[W_1^+] = 1 / sqrt(2 pi)
    for (g, exact) in [
        ("x^2", 1.0),
        ("max(x, 0)", 1.0 / (2.0 * std::f64::consts::PI).sqrt()),
    ] {
        let p = StoppingProblem::preset(
            ModelKind::Bachelier { mu: 0.0, s: 1.0 },
            1,
            1.0,
            ScalarFn::Const(0.0),
            ScalarFn::parse(g).unwrap(),
        )
        .unwrap();
        let paths = simulate(&p, 0.0, &[0.0], 50, 40_000, 17).unwrap();
        let ls = longstaff_schwartz(&p, &paths, 3).unwrap();
        assert!(
            (ls.mean - exact).abs() < 4.0 * ls.std_error,
            "{g}: {ls:?} vs {exact}"
        );
    }
}

#[test]
fn put_pde_and_lattice_agree_and_tighten() {
    let p = gbm_put(0.06);
    let reference = dense::root_value(&p, 0.0, 100.0, 4000, Scheme::Binomial)
        .unwrap()
        .root;
    let coarse = (put_pde(&p, 201, 100) - reference).abs();
    let fine = (put_pde(&p, 401, 200) - reference).abs();
    assert!(fine < 0.002 * reference, "fine error {fine}");
    assert!(fine < coarse, "{coarse} -> {fine}");
    let tri = dense::root_value(&p, 0.0, 100.0, 2000, Scheme::Trinomial)
        .unwrap()
        .root;
    assert!((tri - reference).abs() < 0.002 * reference);
}

#[test]
fn two_dimensional_pde_matches_tensor_lattice() {
    let p = StoppingProblem::new(
        2,
        2,
        0.5,
        vec![ScalarFn::Const(0.05), ScalarFn::Const(-0.1)],
        vec![
            ScalarFn::Const(0.4),
            ScalarFn::Const(0.0),
            ScalarFn::Const(0.2),
            ScalarFn::Const(0.3),
        ],
        ScalarFn::Const(-0.1),
        ScalarFn::parse("max(x_1 + x_2, 0)").unwrap(),
    )
    .unwrap();
    let grid = Grid::centered(
        &p,
        0.0,
        &[0.0, 0.0],
        6.0,
        vec![121, 121],
        100,
        BoundaryMode::DirichletG,
    )
    .unwrap();
    let pde = solve_variational_inequality(&p, &grid, &SolverConfig::default()).unwrap();
    let v = pde.value_at(0, &[0.0, 0.0]).unwrap();
    let chain = ChainApprox::build(&p, 0.0, &[0.0, 0.0], 120, Scheme::TensorTrinomial).unwrap();
    let lattice = *snell_envelope(&chain, &p).root();
    assert!(
        (v - lattice).abs() < 0.01 * lattice,
        "pde {v} lattice {lattice}"
    );
}

#[test]
fn rules_never_beat_the_value() {
    let p = gbm_put(0.06);
    let grid = Grid::new(
        vec![0.0],
        vec![400.0],
        vec![401],
        0.0,
        1.0,
        200,
        BoundaryMode::DirichletG,
    )
    .unwrap();
    let surface = solve_variational_inequality(&p, &grid, &pi()).unwrap();
    let v = surface.value_at(0, &[100.0]).unwrap();
    let allowance = 0.005 * v;
    let paths = simulate(&p, 0.0, &[100.0], 50, 40_000, 23).unwrap();
    let tau_hat = evaluate_rule(&p, &paths, RuleSource::Pde(&surface), 1e-8).unwrap();
    for source in [
        RuleSource::Immediate,
        RuleSource::Terminal,
        RuleSource::Pde(&surface),
    ] {
        let e = evaluate_rule(&p, &paths, source, 1e-8).unwrap();
        assert!(e.mean <= v + 3.0 * e.std_error + allowance, "{e:?} vs {v}");
    }
    // the extracted rule is at least as good as the regression rule, up to noise
    let fresh = simulate(&p, 0.0, &[100.0], 50, 40_000, 24).unwrap();
    let ls = longstaff_schwartz(&p, &fresh, 3).unwrap();
    let se = (tau_hat.std_error.powi(2) + ls.std_error.powi(2)).sqrt();
    assert!(tau_hat.mean >= ls.mean - 3.0 * se, "{tau_hat:?} vs {ls:?}");
}

#[test]
fn execution_policy_does_not_change_bits() {
    let p = gbm_put(-0.06);
    let grid = Grid::new(
        vec![0.0],
        vec![400.0],
        vec![201],
        0.0,
        1.0,
        50,
        BoundaryMode::DirichletG,
    )
    .unwrap();
    for scheme in [PdeScheme::Psor, PdeScheme::PolicyIteration] {
        let run = |exec| {
            let cfg = SolverConfig {
                scheme,
                exec,
                ..Default::default()
            };
            solve_variational_inequality(&p, &grid, &cfg)
                .unwrap()
                .values
        };
        assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
    }
    let chain = ChainApprox::build(&p, 0.0, &[100.0], 300, Scheme::Trinomial).unwrap();
    assert_eq!(
        snell_envelope_with(&chain, &p, Execution::Sequential),
        snell_envelope_with(&chain, &p, Execution::Parallel)
    );
    let a = dense::root_value_with(&p, 0.0, 100.0, 500, Scheme::Binomial, Execution::Sequential)
        .unwrap();
    let b =
        dense::root_value_with(&p, 0.0, 100.0, 500, Scheme::Binomial, Execution::Parallel).unwrap();
    assert_eq!(a.root.to_bits(), b.root.to_bits());
}
