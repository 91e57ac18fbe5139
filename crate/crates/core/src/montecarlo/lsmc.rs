use nalgebra::{DMatrix, DVector};

use crate::exec::{chunked_reduce, map_indexed, Execution};
use crate::model::StoppingProblem;
use crate::sde::PathBundle;

use super::estimate::ValueEstimate;
use super::McError;

/// Smallest eigenvalue ratio of the unit-diagonal normal matrix accepted.
const MIN_RCOND: f64 = 1e-13;

/// Monomial exponents of total degree `<= degree` in `n` variables, graded.
fn monomials(n: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; n]];
    for total in 1..=degree {
        let mut cur = vec![0u32; n];
        fn rec(i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if i + 1 == cur.len() {
                cur[i] = left;
                out.push(cur.clone());
                return;
            }
            for e in (0..=left).rev() {
                cur[i] = e;
                rec(i + 1, left - e, cur, out);
            }
        }
        if n > 0 {
            rec(0, total as u32, &mut cur, &mut out);
        }
    }
    out
}

/// Regression of the continuation value at one exercise date.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFit {
    /// Only paths with `g` strictly above this level may stop.
    floor: Option<f64>,
    /// Coordinates with nonzero spread, with their mean and standard deviation.
    dims: Vec<(usize, f64, f64)>,
    exponents: Vec<Vec<u32>>,
    coef: Vec<f64>,
}

impl StepFit {
    fn basis(&self, x: &[f64], out: &mut [f64]) {
        let z: Vec<f64> = self.dims.iter().map(|&(i, c, s)| (x[i] - c) / s).collect();
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = z
                .iter()
                .zip(e)
                .fold(1.0, |acc, (zi, &ei)| acc * zi.powi(ei as i32));
        }
    }

    /// Stop when `g >= C_hat`, ties stopping.
    pub fn stops(&self, g: f64, x: &[f64]) -> bool {
        self.floor.is_none_or(|f| g > f) && g >= self.predict(x)
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut phi = vec![0.0; self.exponents.len()];
        self.basis(x, &mut phi);
        phi.iter().zip(&self.coef).map(|(a, b)| a * b).sum()
    }
}

/// Regression stopping rule: stop at the first date where `g >= C_hat`.
#[derive(Debug, Clone, PartialEq)]
pub struct LsmcRule {
    pub degree: usize,
    pub times: Vec<f64>,
    /// Fits for dates `0..N`; the last date always stops.
    pub fits: Vec<StepFit>,
}

impl LsmcRule {
    pub fn stop_index(&self, p: &StoppingProblem, bundle: &PathBundle, path: usize) -> usize {
        for (k, fit) in self.fits.iter().enumerate() {
            let x = bundle.state(path, k);
            if fit.stops(p.g(x), x) {
                return k;
            }
        }
        self.fits.len()
    }
}

/// Least squares of `y` on monomials of the standardized states of the
/// paths listed in `rows`.
fn fit_step<'a>(
    states: impl Fn(usize) -> &'a [f64] + Sync + Send,
    y: &[f64],
    rows: &[usize],
    d: usize,
    degree: usize,
    step: usize,
    exec: Execution,
) -> Result<StepFit, McError> {
    let n = rows.len();
    let states = |j: usize| states(rows[j]);
    let mut dims = Vec::new();
    for i in 0..d {
        let mean =
            chunked_reduce(exec, n, || 0.0, |a, j| a + states(j)[i], |a, b| a + b) / n as f64;
        let var = chunked_reduce(
            exec,
            n,
            || 0.0,
            |a, j| a + (states(j)[i] - mean).powi(2),
            |a, b| a + b,
        ) / n as f64;
        let sd = var.sqrt();
        if sd > 1e-12 * (1.0 + mean.abs()) {
            dims.push((i, mean, sd));
        }
    }
    let exponents = monomials(dims.len(), degree);
    let nb = exponents.len();
    let mut fit = StepFit {
        floor: None,
        dims,
        exponents,
        coef: vec![0.0; nb],
    };
    // normal equations [G | h], accumulated in chunk order
    let acc = chunked_reduce(
        exec,
        n,
        || vec![0.0; nb * nb + nb],
        |mut a, j| {
            let mut phi = vec![0.0; nb];
            fit.basis(states(j), &mut phi);
            for r in 0..nb {
                for c in 0..nb {
                    a[r * nb + c] += phi[r] * phi[c];
                }
                a[nb * nb + r] += phi[r] * y[rows[j]];
            }
            a
        },
        |mut a, b| {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            a
        },
    );
    let g = DMatrix::from_row_slice(nb, nb, &acc[..nb * nb]);
    let h = DVector::from_column_slice(&acc[nb * nb..]);
    let diag: Vec<f64> = (0..nb).map(|i| g[(i, i)].sqrt()).collect();
    let unit = DMatrix::from_fn(nb, nb, |r, c| g[(r, c)] / (diag[r] * diag[c]));
    let eig = unit.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(l, h), e| (l.min(*e), h.max(*e)));
    let rcond = lo / hi;
    if !(rcond >= MIN_RCOND) {
        return Err(McError::Conditioning {
            step,
            degree,
            rcond,
        });
    }
    let rhs = DVector::from_fn(nb, |i, _| h[i] / diag[i]);
    let sol = unit
        .cholesky()
        .ok_or(McError::Conditioning {
            step,
            degree,
            rcond,
        })?
        .solve(&rhs);
    fit.coef = (0..nb).map(|i| sol[i] / diag[i]).collect();
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsmcOptions {
    pub degree: usize,
    /// Regress only on paths where `g` is strictly above its smallest value
    /// across paths at that date, and never stop the others. This is the usual
    /// in-the-money restriction; it assumes stopping at the lowest reward
    /// level is never strictly better than continuing.
    pub in_the_money_only: bool,
    pub exec: Execution,
}

impl LsmcOptions {
    pub fn new(degree: usize) -> Self {
        LsmcOptions {
            degree,
            in_the_money_only: true,
            exec: Execution::default(),
        }
    }
}

/// Backward regression on `bundle`; returns the rule and the in-sample
/// per-path gains.
pub fn fit_lsmc(
    p: &StoppingProblem,
    bundle: &PathBundle,
    opts: &LsmcOptions,
) -> Result<(LsmcRule, Vec<f64>), McError> {
    let (degree, exec) = (opts.degree, opts.exec);
    if degree == 0 {
        return Err(McError::Invalid(
            "regression degree must be at least 1".into(),
        ));
    }
    if bundle.d != p.dim() {
        return Err(McError::Invalid(format!(
            "bundle has d = {}, problem has d = {}",
            bundle.d,
            p.dim()
        )));
    }
    let n = bundle.n_paths;
    let n_steps = bundle.n_steps();
    let times = &bundle.times;
    // gain to go from the current date under the rule being built
    let mut cash: Vec<f64> = map_indexed(exec, n, |i| p.g(bundle.state(i, n_steps)));
    let mut fits = Vec::with_capacity(n_steps);
    for k in (0..n_steps).rev() {
        let dt = times[k + 1] - times[k];
        let y: Vec<f64> = map_indexed(exec, n, |i| {
            p.f(times[k], bundle.state(i, k)) * dt + cash[i]
        });
        let gk: Vec<f64> = map_indexed(exec, n, |i| p.g(bundle.state(i, k)));
        let floor = opts
            .in_the_money_only
            .then(|| gk.iter().copied().fold(f64::INFINITY, f64::min));
        let rows: Vec<usize> = match floor {
            Some(f) => (0..n).filter(|&i| gk[i] > f).collect(),
            None => (0..n).collect(),
        };
        let fit = if rows.is_empty() {
            // nobody may stop: any fit will do
            StepFit {
                floor,
                dims: Vec::new(),
                exponents: vec![Vec::new()],
                coef: vec![f64::INFINITY],
            }
        } else {
            // too few regression paths for the full basis: fall back to a constant
            let deg = if rows.len() < 4 * monomials(p.dim(), degree).len() {
                0
            } else {
                degree
            };
            StepFit {
                floor,
                ..fit_step(|i| bundle.state(i, k), &y, &rows, p.dim(), deg, k, exec)?
            }
        };
        cash = map_indexed(exec, n, |i| {
            let x = bundle.state(i, k);
            let g = gk[i];
            if fit.stops(g, x) {
                g
            } else {
                y[i]
            }
        });
        fits.push(fit);
    }
    fits.reverse();
    if let Some(i) = cash.iter().position(|c| !c.is_finite()) {
        return Err(McError::NonFinite { path: i });
    }
    Ok((
        LsmcRule {
            degree,
            times: times.clone(),
            fits,
        },
        cash,
    ))
}

/// In-sample estimate (lower-biased by reuse of the regression paths).
pub fn longstaff_schwartz(
    p: &StoppingProblem,
    bundle: &PathBundle,
    degree: usize,
) -> Result<ValueEstimate, McError> {
    longstaff_schwartz_with(p, bundle, &LsmcOptions::new(degree))
}

pub fn longstaff_schwartz_with(
    p: &StoppingProblem,
    bundle: &PathBundle,
    opts: &LsmcOptions,
) -> Result<ValueEstimate, McError> {
    let (_, gains) = fit_lsmc(p, bundle, opts)?;
    Ok(ValueEstimate::from_samples(
        "lsmc",
        &gains,
        bundle.seed,
        0.0,
        opts.exec,
    ))
}

/// Fits on `train` and prices the resulting rule on the independent `test`
/// bundle, which must share the time grid.
pub fn longstaff_schwartz_out_of_sample(
    p: &StoppingProblem,
    train: &PathBundle,
    test: &PathBundle,
    opts: &LsmcOptions,
) -> Result<ValueEstimate, McError> {
    let exec = opts.exec;
    if train.times != test.times {
        return Err(McError::Invalid(
            "training and test bundles use different time grids".into(),
        ));
    }
    let (rule, _) = fit_lsmc(p, train, opts)?;
    let gains = map_indexed(exec, test.n_paths, |i| {
        let k = rule.stop_index(p, test, i);
        crate::model::realized_gain(p, &test.times, test.path(i), k).map(|r| r.total)
    })
    .into_iter()
    .collect::<Result<Vec<f64>, _>>()?;
    Ok(ValueEstimate::from_samples(
        "lsmc-out-of-sample",
        &gains,
        test.seed,
        0.0,
        exec,
    ))
}
