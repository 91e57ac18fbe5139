use num_traits::Zero;
use optstop_core::enumeration::random::{
    random_gains, random_product_space, random_stopping_time, Manifest,
};
use optstop_core::enumeration::{
    approximate_stopping_time, enumerate_stopping_times, value_brute_force, verify_key_equality,
    StoppingTimeTable,
};
use optstop_core::montecarlo::{evaluate_rule_with, RuleSource};
use optstop_core::pde::{
    solve_variational_inequality, BoundaryMode, Grid, PdeScheme, SolverConfig,
};
use optstop_core::sde::simulate_with;
use optstop_core::{Execution, ModelKind, ScalarFn, StoppingProblem};
use proptest::prelude::*;

fn bm(g: ScalarFn) -> StoppingProblem {
    StoppingProblem::preset(
        ModelKind::Bachelier { mu: 0.1, s: 1.0 },
        1,
        1.0,
        ScalarFn::Const(0.0),
        g,
    )
    .unwrap()
}

/// `(a - x)^+ + c (1 - |x - m|)^+`, the second term a nonnegative bump.
fn obstacle(a: f64, c: f64, m: f64) -> ScalarFn {
    ScalarFn::parse(&format!("max({a} - x, 0) + {c} * max(1 - abs(x - {m}), 0)")).unwrap()
}

fn small_grid() -> Grid {
    Grid::new(
        vec![-5.0],
        vec![5.0],
        vec![81],
        0.0,
        1.0,
        40,
        BoundaryMode::DirichletG,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn key_equality_on_random_spaces(seed in any::<u64>()) {
        let m = Manifest::KEY_EQUALITY;
        let space = random_product_space(&m, seed);
        let gains = random_gains(&space, &m, seed);
        for theta in [StoppingTimeTable::constant(&space, 0), random_stopping_time(&space, 0.5, seed ^ 1)] {
            let r = verify_key_equality(&space, &theta, &gains).unwrap();
            prop_assert!(r.max_gap.is_zero());
            prop_assert_eq!(value_brute_force(&space, &gains, &theta, true).unwrap(), r.esssup);
        }
    }

    #[test]
    fn approximation_rebuilds_every_stopping_time(seed in any::<u64>()) {
        let m = Manifest::APPROXIMATION;
        let space = random_product_space(&m, seed);
        for tau in enumerate_stopping_times(&space, m.max_stopping_times).unwrap() {
            let trace = approximate_stopping_time(&space, &tau).unwrap();
            prop_assert_eq!(&trace.reconstructed, &tau);
            let mut cover = vec![0; space.n_atoms()];
            for (b, t) in trace.components() {
                prop_assert!(t.check_h_adapted(&space).is_ok());
                b.ones().for_each(|w| cover[w] += 1);
            }
            prop_assert!(cover.iter().all(|c| *c == 1));
        }
    }

    #[test]
    fn simulation_is_bitwise_reproducible(seed in any::<u64>(), n_paths in 1usize..3000, n_steps in 1usize..20) {
        let p = StoppingProblem::preset(ModelKind::Gbm { mu: 0.03, nu: 0.3 }, 1, 1.0, ScalarFn::Const(0.0), ScalarFn::Const(0.0)).unwrap();
        let a = simulate_with(&p, 0.0, &[1.0], n_steps, n_paths, seed, Execution::Sequential).unwrap();
        let b = simulate_with(&p, 0.0, &[1.0], n_steps, n_paths, seed, Execution::Parallel).unwrap();
        prop_assert_eq!(a.states.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.states.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn raising_the_obstacle_never_lowers_v(a in -1.0f64..1.0, c in 0.0f64..2.0, m in -3.0f64..3.0) {
        let grid = small_grid();
        let cfg = SolverConfig::default();
        let low = solve_variational_inequality(&bm(obstacle(a, 0.0, m)), &grid, &cfg).unwrap();
        let high = solve_variational_inequality(&bm(obstacle(a, c, m)), &grid, &cfg).unwrap();
        let slack = 10.0 * cfg.tol * high.scale();
        for (l, h) in low.values.iter().zip(&high.values) {
            prop_assert!(l.iter().zip(h).all(|(l, h)| *h >= *l - slack));
        }
    }

    #[test]
    fn psor_and_policy_iteration_agree(a in -1.0f64..1.0, c in 0.0f64..2.0, m in -3.0f64..3.0) {
        let grid = small_grid();
        let p = bm(obstacle(a, c, m));
        let run = |scheme| solve_variational_inequality(&p, &grid, &SolverConfig { scheme, ..Default::default() }).unwrap();
        let (x, y) = (run(PdeScheme::Psor), run(PdeScheme::PolicyIteration));
        let tol = 10.0 * 1e-10 * x.scale();
        for (u, v) in x.values.iter().zip(&y.values) {
            prop_assert!(u.iter().zip(v).all(|(u, v)| (u - v).abs() <= tol));
        }
    }

    #[test]
    fn raising_g_never_lowers_a_rule_value(a in -1.0f64..1.0, c in 0.0f64..2.0, m in -3.0f64..3.0, seed in any::<u64>()) {
        // same paths, same immediate and terminal rules, larger payoff
        let (low, high) = (bm(obstacle(a, 0.0, m)), bm(obstacle(a, c, m)));
        let paths = simulate_with(&low, 0.0, &[0.0], 10, 500, seed, Execution::Sequential).unwrap();
        for source in [RuleSource::Immediate, RuleSource::Terminal] {
            let l = evaluate_rule_with(&low, &paths, source, 0.0, Execution::Sequential).unwrap();
            let h = evaluate_rule_with(&high, &paths, source, 0.0, Execution::Sequential).unwrap();
            prop_assert!(h.mean >= l.mean);
        }
    }
}
