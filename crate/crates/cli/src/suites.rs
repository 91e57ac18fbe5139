//! Exact verification suites behind `optstop verify`.

use num_traits::{Signed, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use optstop_core::enumeration::random::{
    binary_spaces, random_gains, random_product_space, random_stopping_time, Manifest,
};
use optstop_core::enumeration::{
    approximate_stopping_time, enumerate_stopping_times, value_brute_force, verify_key_equality,
    verify_smallest_optimal, FiniteFilteredSpace, StoppingTimeTable,
};
use optstop_core::lattice::{
    snell_envelope, verify_dpp, ChainApprox, FnGains, PathTree, Scheme, MAX_PATHS,
};
use optstop_core::scalar::{format_f64, format_rational, int, ratio};
use optstop_core::{ModelKind, Rational, ScalarFn, StoppingProblem};

use crate::config::VerifySpec;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: usize,
    pub total: usize,
    pub summary: String,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.passed == self.total && self.failures.is_empty()
    }

    pub fn line(&self) -> String {
        format!(
            "{}: {}/{} {}",
            self.suite, self.passed, self.total, self.summary
        )
    }
}

fn case_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// Conditional value identity and restricted-versus-full brute force, on
/// random product spaces with `theta = 0` and a random `theta`.
pub fn key_equality(spec: &VerifySpec) -> Result<SuiteReport, CliError> {
    let m = Manifest::KEY_EQUALITY;
    let mut max_gap = Rational::zero();
    let mut passed = 0;
    let mut failures = Vec::new();
    for i in 0..spec.spaces {
        let seed = case_seed(spec.seed, i);
        let space = random_product_space(&m, seed);
        let gains = random_gains(&space, &m, seed);
        let mut ok = true;
        for theta in [
            StoppingTimeTable::constant(&space, 0),
            random_stopping_time(&space, 0.4, seed),
        ] {
            let r = verify_key_equality(&space, &theta, &gains)?;
            let restricted = value_brute_force(&space, &gains, &theta, true)?;
            if r.max_gap > max_gap {
                max_gap = r.max_gap.clone();
            }
            if !r.max_gap.is_zero() || restricted != r.esssup {
                ok = false;
            }
        }
        if ok {
            passed += 1;
        } else {
            failures.push(format!("seed {seed}"));
        }
    }
    Ok(SuiteReport {
        suite: "key-equality".into(),
        passed,
        total: spec.spaces,
        summary: format!("gap={max_gap}"),
        failures,
    })
}

/// The first-contact rule attains the enumerated maximum and is below every
/// optimal stopping time, on all binary spaces up to the configured depth.
pub fn smallest_optimal(spec: &VerifySpec) -> Result<SuiteReport, CliError> {
    let m = Manifest::KEY_EQUALITY;
    let (mut passed, mut total) = (0, 0);
    let mut failures = Vec::new();
    for depth in 1..=spec.binary_depth {
        for (j, space) in binary_spaces(depth, spec.seed).iter().enumerate() {
            for t in 0..spec.gain_tables {
                let seed = case_seed(spec.seed, (depth * 1000 + j) * 1000 + t);
                let gains = random_gains(space, &m, seed);
                let r = verify_smallest_optimal(space, &gains)?;
                total += 1;
                if r.is_smallest && r.tau_hat_value == r.max_value {
                    passed += 1;
                } else {
                    failures.push(format!("depth {depth} shape {j} gains seed {seed}"));
                }
            }
        }
    }
    Ok(SuiteReport {
        suite: "smallest-optimal".into(),
        passed,
        total,
        summary: format!("binary depth<={}", spec.binary_depth),
        failures,
    })
}

fn approx_case(space: &FiniteFilteredSpace, tau: &StoppingTimeTable) -> Result<(), String> {
    let trace = approximate_stopping_time(space, tau).map_err(|e| e.to_string())?;
    if trace.reconstructed != *tau {
        return Err("reconstruction differs".into());
    }
    let n = space.n_atoms();
    let mut cover = vec![0usize; n];
    for cell in &trace.cells {
        cell.tau.check_h_adapted(space).map_err(|e| e.to_string())?;
        for w in cell.b_hat.ones() {
            cover[w] += 1;
            if cell.tau.stop_time[w] != tau.stop_time[w] {
                return Err(format!("cell value differs at atom {w}"));
            }
        }
    }
    if cover.iter().any(|c| *c != 1) {
        return Err("cells do not partition the atoms".into());
    }
    Ok(())
}

/// Decomposition into `H`-adapted pieces on `G` cells, for every stopping
/// time on each random space.
pub fn approx(spec: &VerifySpec) -> Result<SuiteReport, CliError> {
    let m = Manifest::APPROXIMATION;
    let (mut passed, mut total) = (0, 0);
    let mut failures = Vec::new();
    for i in 0..spec.approx_spaces {
        let seed = case_seed(spec.seed, i);
        let space = random_product_space(&m, seed);
        for tau in enumerate_stopping_times(&space, m.max_stopping_times)? {
            total += 1;
            match approx_case(&space, &tau) {
                Ok(()) => passed += 1,
                Err(e) => failures.push(format!("seed {seed} tau {:?}: {e}", tau.stop_time)),
            }
        }
    }
    Ok(SuiteReport {
        suite: "approx".into(),
        passed,
        total,
        summary: format!("stopping times on {} spaces", spec.approx_spaces),
        failures,
    })
}

fn rabs(x: &Rational) -> Rational {
    x.abs()
}

fn rmax(a: Rational, b: Rational) -> Rational {
    if a > b {
        a
    } else {
        b
    }
}

/// Exact chains used by the DPP suite.
pub fn exact_chains(depth: usize) -> Result<Vec<(String, ChainApprox<Rational>)>, CliError> {
    let dt = ratio(1, depth as i64);
    Ok(vec![
        (
            "symmetric walk".into(),
            ChainApprox::walk(
                int(0),
                int(0),
                dt.clone(),
                depth,
                &[(int(-1), ratio(1, 2)), (int(1), ratio(1, 2))],
            )?,
        ),
        (
            "skewed walk".into(),
            ChainApprox::walk(
                int(0),
                int(0),
                dt.clone(),
                depth,
                &[(int(-1), ratio(1, 3)), (int(2), ratio(2, 3))],
            )?,
        ),
        (
            "lazy walk".into(),
            ChainApprox::walk(
                int(0),
                int(0),
                dt.clone(),
                depth,
                &[
                    (int(-1), ratio(1, 4)),
                    (int(0), ratio(1, 2)),
                    (int(1), ratio(1, 4)),
                ],
            )?,
        ),
        (
            "state-dependent walk".into(),
            ChainApprox::from_kernel(vec![int(0)], int(0), dt, depth, |_, x| {
                let up = int(1) / (int(2) + rabs(&x[0]));
                let down = int(1) - up.clone();
                vec![
                    (vec![x[0].clone() + int(1)], up),
                    (vec![x[0].clone() - int(1)], down),
                ]
            })?,
        ),
    ])
}

/// Backward induction with values frozen at random adapted `tau'`, exact on
/// rational chains and to `1e-12` relative on float chains.
pub fn dpp(spec: &VerifySpec) -> Result<SuiteReport, CliError> {
    let depth = spec.dpp_depth;
    let (mut passed, mut total) = (0, 0);
    let mut failures = Vec::new();
    let mut max_exact = Rational::zero();
    let mut max_rel = 0.0f64;
    let gains = FnGains {
        running: |_: &Rational, x: &[Rational]| -x[0].clone() / int(5),
        terminal: |x: &[Rational]| {
            rmax(
                int(1) - x[0].clone() * x[0].clone() / int(4),
                rabs(&(x[0].clone() - int(1))),
            )
        },
    };
    for (c, (name, chain)) in exact_chains(depth)?.into_iter().enumerate() {
        let surface = snell_envelope(&chain, &gains);
        let tree = PathTree::from_chain(&chain, MAX_PATHS)?;
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed(spec.seed, c));
        for r in 0..spec.tau_per_chain {
            let tau = tree.random_stopping_time(&mut rng, 0.3);
            let res = verify_dpp(&chain, &surface, &tree, &tau)?;
            total += 1;
            if res > max_exact {
                max_exact = res.clone();
            }
            if res.is_zero() {
                passed += 1;
            } else {
                failures.push(format!(
                    "{name} draw {r}: residual {}",
                    format_rational(&res)
                ));
            }
        }
    }
    let put = StoppingProblem::preset(
        ModelKind::Gbm { mu: -0.06, nu: 0.2 },
        1,
        1.0,
        ScalarFn::Const(0.0),
        ScalarFn::parse("max(100 - x, 0)").expect("valid payoff"),
    )
    .expect("valid preset");
    let quad = StoppingProblem::preset(
        ModelKind::Bachelier { mu: 0.1, s: 1.0 },
        1,
        1.0,
        ScalarFn::parse("-x").expect("valid gain"),
        ScalarFn::parse("max(1 - x^2, x)").expect("valid payoff"),
    )
    .expect("valid preset");
    let float_chains = [
        (
            "gbm put, binomial",
            ChainApprox::build(&put, 0.0, &[100.0], depth, Scheme::Binomial)?,
            &put,
        ),
        (
            "bachelier, trinomial",
            ChainApprox::build(&quad, 0.0, &[0.0], depth, Scheme::Trinomial)?,
            &quad,
        ),
    ];
    for (c, (name, chain, p)) in float_chains.into_iter().enumerate() {
        let surface = snell_envelope(&chain, p);
        let tree = PathTree::from_chain(&chain, MAX_PATHS)?;
        let scale = surface.scale().max(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed(spec.seed, 100 + c));
        for r in 0..spec.tau_per_chain {
            let tau = tree.random_stopping_time(&mut rng, 0.3);
            let rel = verify_dpp(&chain, &surface, &tree, &tau)? / scale;
            total += 1;
            max_rel = max_rel.max(rel);
            if rel <= 1e-12 {
                passed += 1;
            } else {
                failures.push(format!(
                    "{name} draw {r}: relative residual {}",
                    format_f64(rel)
                ));
            }
        }
    }
    Ok(SuiteReport {
        suite: "dpp".into(),
        passed,
        total,
        summary: format!(
            "residual={max_exact} float_relative={}",
            format_f64(max_rel)
        ),
        failures,
    })
}
