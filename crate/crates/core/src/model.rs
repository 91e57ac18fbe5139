//! The continuous-time stopping problem: dynamics `dX = b dt + sigma dW`,
//! running gain `f` and terminal gain `g` on the horizon `[0, T]`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::expr::{parse_expr, Expr, ParseError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("coefficient {name} is non-finite at t={t}, x={x:?}")]
    Evaluation { name: String, t: f64, x: Vec<f64> },
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("expression for {name}: {source}")]
    Parse {
        name: String,
        #[source]
        source: ParseError,
    },
}

type ScalarClosure = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// A scalar function of `(t, x)`.
#[derive(Clone)]
pub enum ScalarFn {
    Const(f64),
    /// `scale * x_i`
    Linear {
        index: usize,
        scale: f64,
    },
    /// `kappa * (level - x_i)`
    Reverting {
        index: usize,
        kappa: f64,
        level: f64,
    },
    Expr(Arc<Expr>),
    Closure(Arc<ScalarClosure>),
}

impl ScalarFn {
    pub fn closure(f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        ScalarFn::Closure(Arc::new(f))
    }

    pub fn parse(src: &str) -> Result<Self, ParseError> {
        parse_expr(src).map(|e| ScalarFn::Expr(Arc::new(e)))
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            ScalarFn::Const(c) => *c,
            ScalarFn::Linear { index, scale } => scale * x[*index],
            ScalarFn::Reverting {
                index,
                kappa,
                level,
            } => kappa * (level - x[*index]),
            ScalarFn::Expr(e) => e.eval(t, x),
            ScalarFn::Closure(f) => f(t, x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ScalarFn::Const(c) if *c == 0.0)
    }

    fn max_state_index(&self) -> Option<usize> {
        match self {
            ScalarFn::Const(_) | ScalarFn::Closure(_) => None,
            ScalarFn::Linear { index, .. } | ScalarFn::Reverting { index, .. } => Some(*index),
            ScalarFn::Expr(e) => e.max_state_index(),
        }
    }

    fn uses_time(&self) -> bool {
        matches!(self, ScalarFn::Expr(e) if e.uses_time())
    }
}

impl fmt::Debug for ScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarFn::Const(c) => write!(f, "{c}"),
            ScalarFn::Linear { index, scale } => write!(f, "{scale}*x_{}", index + 1),
            ScalarFn::Reverting {
                index,
                kappa,
                level,
            } => write!(f, "{kappa}*({level} - x_{})", index + 1),
            ScalarFn::Expr(e) => write!(f, "{e}"),
            ScalarFn::Closure(_) => f.write_str("<closure>"),
        }
    }
}

/// Which preset built the dynamics, if any.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    /// `b = mu`, `sigma = s` (componentwise, `m = d`).
    Bachelier {
        mu: f64,
        s: f64,
    },
    /// `b = mu x`, `sigma = nu x` (componentwise, `m = d`).
    Gbm {
        mu: f64,
        nu: f64,
    },
    /// `b = kappa (level - x)`, `sigma = s` (componentwise, `m = d`).
    Ou {
        kappa: f64,
        level: f64,
        s: f64,
    },
    Custom,
}

/// Continuous-time optimal stopping problem. Immutable once built.
#[derive(Clone, Debug)]
pub struct StoppingProblem {
    d: usize,
    m: usize,
    horizon: f64,
    drift: Vec<ScalarFn>,
    /// Row-major `d x m`.
    vol: Vec<ScalarFn>,
    running: ScalarFn,
    terminal: ScalarFn,
    growth_q: f64,
    kind: ModelKind,
}

impl StoppingProblem {
    /// Builds and validates a problem. `vol` is row-major `d x m`.
    pub fn new(
        d: usize,
        m: usize,
        horizon: f64,
        drift: Vec<ScalarFn>,
        vol: Vec<ScalarFn>,
        running: ScalarFn,
        terminal: ScalarFn,
    ) -> Result<Self, ModelError> {
        if d == 0 || m == 0 {
            return Err(ModelError::Invalid("d and m must be at least 1".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ModelError::Invalid(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if drift.len() != d {
            return Err(ModelError::Dimension(format!(
                "drift has {} components, d = {d}",
                drift.len()
            )));
        }
        if vol.len() != d * m {
            return Err(ModelError::Dimension(format!(
                "volatility has {} entries, expected d*m = {}",
                vol.len(),
                d * m
            )));
        }
        let named = drift
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("b_{}", i + 1), c))
            .chain(
                vol.iter()
                    .enumerate()
                    .map(|(k, c)| (format!("sigma_{}_{}", k / m + 1, k % m + 1), c)),
            )
            .chain([("f".to_string(), &running), ("g".to_string(), &terminal)]);
        for (name, c) in named {
            if let Some(i) = c.max_state_index() {
                if i >= d {
                    return Err(ModelError::Dimension(format!(
                        "{name} references x_{} but d = {d}",
                        i + 1
                    )));
                }
            }
        }
        if terminal.uses_time() {
            return Err(ModelError::Invalid("g must not depend on t".into()));
        }
        Ok(StoppingProblem {
            d,
            m,
            horizon,
            drift,
            vol,
            running,
            terminal,
            growth_q: 2.0,
            kind: ModelKind::Custom,
        })
    }

    /// Preset dynamics with user-supplied gains; `m = d`, diagonal volatility.
    pub fn preset(
        kind: ModelKind,
        d: usize,
        horizon: f64,
        running: ScalarFn,
        terminal: ScalarFn,
    ) -> Result<Self, ModelError> {
        let diag = |i: usize, f: ScalarFn| -> Vec<ScalarFn> {
            (0..d)
                .map(|j| {
                    if i == j {
                        f.clone()
                    } else {
                        ScalarFn::Const(0.0)
                    }
                })
                .collect()
        };
        let (drift, vol): (Vec<ScalarFn>, Vec<ScalarFn>) = match kind {
            ModelKind::Bachelier { mu, s } => (
                vec![ScalarFn::Const(mu); d],
                (0..d).flat_map(|i| diag(i, ScalarFn::Const(s))).collect(),
            ),
            ModelKind::Gbm { mu, nu } => (
                (0..d)
                    .map(|i| ScalarFn::Linear {
                        index: i,
                        scale: mu,
                    })
                    .collect(),
                (0..d)
                    .flat_map(|i| {
                        diag(
                            i,
                            ScalarFn::Linear {
                                index: i,
                                scale: nu,
                            },
                        )
                    })
                    .collect(),
            ),
            ModelKind::Ou { kappa, level, s } => (
                (0..d)
                    .map(|i| ScalarFn::Reverting {
                        index: i,
                        kappa,
                        level,
                    })
                    .collect(),
                (0..d).flat_map(|i| diag(i, ScalarFn::Const(s))).collect(),
            ),
            ModelKind::Custom => {
                return Err(ModelError::Invalid(
                    "custom models are built with StoppingProblem::new".into(),
                ))
            }
        };
        let mut p = StoppingProblem::new(d, d, horizon, drift, vol, running, terminal)?;
        p.kind = kind;
        Ok(p)
    }

    /// Sets the polynomial growth exponent used by the growth spot-check.
    pub fn with_growth_hint(mut self, q: f64) -> Result<Self, ModelError> {
        if !(q >= 0.0 && q.is_finite()) {
            return Err(ModelError::Invalid(format!(
                "growth exponent must be >= 0, got {q}"
            )));
        }
        self.growth_q = q;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.d
    }
    pub fn noise_dim(&self) -> usize {
        self.m
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn growth_hint(&self) -> f64 {
        self.growth_q
    }
    pub fn kind(&self) -> ModelKind {
        self.kind
    }
    pub fn running_gain(&self) -> &ScalarFn {
        &self.running
    }
    pub fn terminal_gain(&self) -> &ScalarFn {
        &self.terminal
    }
    pub fn drift_fns(&self) -> &[ScalarFn] {
        &self.drift
    }
    pub fn vol_fns(&self) -> &[ScalarFn] {
        &self.vol
    }

    /// Writes `b(t, x)` into `out` (length `d`).
    #[inline]
    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.drift) {
            *o = c.eval(t, x);
        }
    }

    /// Writes `sigma(t, x)` row-major into `out` (length `d*m`).
    #[inline]
    pub fn vol_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.vol) {
            *o = c.eval(t, x);
        }
    }

    pub fn drift(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.drift_into(t, x, &mut out);
        out
    }

    pub fn vol(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d * self.m];
        self.vol_into(t, x, &mut out);
        out
    }

    /// `sigma sigma^T` at `(t, x)`, row-major `d x d`.
    pub fn diffusion(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let s = self.vol(t, x);
        let (d, m) = (self.d, self.m);
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..m).map(|k| s[i * m + k] * s[j * m + k]).sum();
            }
        }
        a
    }

    #[inline]
    pub fn f(&self, t: f64, x: &[f64]) -> f64 {
        self.running.eval(t, x)
    }

    #[inline]
    pub fn g(&self, x: &[f64]) -> f64 {
        self.terminal.eval(0.0, x)
    }

    /// Like [`Self::g`] but reports non-finite values.
    pub fn g_checked(&self, x: &[f64]) -> Result<f64, ModelError> {
        finite("g", 0.0, x, self.g(x))
    }

    pub fn f_checked(&self, t: f64, x: &[f64]) -> Result<f64, ModelError> {
        finite("f", t, x, self.f(t, x))
    }
}

fn finite(name: &str, t: f64, x: &[f64], v: f64) -> Result<f64, ModelError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ModelError::Evaluation {
            name: name.to_string(),
            t,
            x: x.to_vec(),
        })
    }
}

/// Gain realized by stopping a discrete path at `stop_index`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealizedGain {
    pub integral_part: f64,
    pub terminal_part: f64,
    pub total: f64,
}

/// Left-Riemann sum of `f` up to `stop_index` plus `g` at the stopped state.
///
/// `path` is flat, `times.len() * d` long.
pub fn realized_gain(
    p: &StoppingProblem,
    times: &[f64],
    path: &[f64],
    stop_index: usize,
) -> Result<RealizedGain, ModelError> {
    let d = p.dim();
    if path.len() != times.len() * d {
        return Err(ModelError::Dimension(format!(
            "path has {} values, expected {} times x d={d}",
            path.len(),
            times.len()
        )));
    }
    if stop_index >= times.len() {
        return Err(ModelError::Dimension(format!(
            "stop index {stop_index} outside grid of {} times",
            times.len()
        )));
    }
    let mut integral_part = 0.0;
    for i in 0..stop_index {
        integral_part += p.f(times[i], &path[i * d..(i + 1) * d]) * (times[i + 1] - times[i]);
    }
    let terminal_part = p.g(&path[stop_index * d..(stop_index + 1) * d]);
    Ok(RealizedGain {
        integral_part,
        terminal_part,
        total: integral_part + terminal_part,
    })
}

/// Axis-aligned sampling box.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Region {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, ModelError> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(ModelError::Dimension(
                "box bounds must have equal, nonzero length".into(),
            ));
        }
        if lo
            .iter()
            .zip(&hi)
            .any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite())
        {
            return Err(ModelError::Invalid(
                "box must satisfy lo <= hi with finite bounds".into(),
            ));
        }
        Ok(Region { lo, hi })
    }

    pub fn cube(d: usize, r: f64) -> Self {
        Region {
            lo: vec![-r; d],
            hi: vec![r; d],
        }
    }

    fn scaled(&self, k: f64) -> Self {
        let mid: Vec<f64> = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect();
        Region {
            lo: self
                .lo
                .iter()
                .zip(&mid)
                .map(|(l, c)| c + k * (l - c))
                .collect(),
            hi: self
                .hi
                .iter()
                .zip(&mid)
                .map(|(h, c)| c + k * (h - c))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    LipschitzDrift,
    LipschitzVol,
    Growth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// `"samples"` or `"box"`: which doubling exposed the divergence.
    pub under: &'static str,
    pub base: f64,
    pub doubled: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub lipschitz_estimate_b: f64,
    pub lipschitz_estimate_sigma: f64,
    pub growth_estimate_fg: f64,
    pub violations: Vec<Violation>,
}

/// Ratio by which an estimate must grow under doubling to be flagged.
pub const DIVERGENCE_RATIO: f64 = 1.5;

#[derive(Debug, Clone, Copy)]
struct Estimates {
    lip_b: f64,
    lip_sigma: f64,
    growth: f64,
}

/// Draws sample pairs `(t, x, y)` in the unit cube; the first `n` pairs of a
/// seed are a prefix of the first `2n`.
fn unit_samples(d: usize, n_pairs: usize, seed: u64) -> Vec<(f64, Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_pairs)
        .map(|_| {
            let t: f64 = rng.random();
            let x: Vec<f64> = (0..d).map(|_| rng.random()).collect();
            let y: Vec<f64> = (0..d).map(|_| rng.random()).collect();
            (t, x, y)
        })
        .collect()
}

fn estimate(
    p: &StoppingProblem,
    region: &Region,
    samples: &[(f64, Vec<f64>, Vec<f64>)],
) -> Result<Estimates, ModelError> {
    let d = p.dim();
    let place = |u: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|i| region.lo[i] + u[i] * (region.hi[i] - region.lo[i]))
            .collect()
    };
    let check_all = |name: &str, t: f64, x: &[f64], vals: &[f64]| -> Result<(), ModelError> {
        for v in vals {
            finite(name, t, x, *v)?;
        }
        Ok(())
    };
    let mut est = Estimates {
        lip_b: 0.0,
        lip_sigma: 0.0,
        growth: 0.0,
    };
    for (u, ux, uy) in samples {
        let t = u * p.horizon();
        let (x, y) = (place(ux), place(uy));
        let dist = norm(&x.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>());
        let (bx, by) = (p.drift(t, &x), p.drift(t, &y));
        let (sx, sy) = (p.vol(t, &x), p.vol(t, &y));
        check_all("b", t, &x, &bx)?;
        check_all("b", t, &y, &by)?;
        check_all("sigma", t, &x, &sx)?;
        check_all("sigma", t, &y, &sy)?;
        if dist > 0.0 {
            let db = norm(&bx.iter().zip(&by).map(|(a, b)| a - b).collect::<Vec<_>>());
            let ds = norm(&sx.iter().zip(&sy).map(|(a, b)| a - b).collect::<Vec<_>>());
            est.lip_b = est.lip_b.max(db / dist);
            est.lip_sigma = est.lip_sigma.max(ds / dist);
        }
        for z in [&x, &y] {
            let fg = p.f_checked(t, z)?.abs() + p.g_checked(z)?.abs();
            est.growth = est.growth.max(fg / (1.0 + norm(z).powf(p.growth_hint())));
        }
    }
    Ok(est)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Empirical check of the Lipschitz and polynomial-growth conditions on `region`.
///
/// Estimates use `n_samples` points (paired into difference quotients).
/// Divergence is probed by doubling the sample count and, separately, the
/// box; growth of an estimate by more than [`DIVERGENCE_RATIO`] is reported
/// as a violation. Violations are advisory, never errors.
pub fn spot_check_assumptions(
    p: &StoppingProblem,
    region: &Region,
    n_samples: usize,
    seed: u64,
) -> Result<AssumptionReport, ModelError> {
    if region.lo.len() != p.dim() {
        return Err(ModelError::Dimension(format!(
            "box has dimension {}, problem has d = {}",
            region.lo.len(),
            p.dim()
        )));
    }
    if n_samples < 2 {
        return Err(ModelError::Invalid(
            "spot check needs at least 2 samples".into(),
        ));
    }
    let pairs = n_samples / 2;
    let all = unit_samples(p.dim(), 2 * pairs, seed);
    let base = estimate(p, region, &all[..pairs])?;
    let more = estimate(p, region, &all)?;
    let wide = estimate(p, &region.scaled(2.0), &all[..pairs])?;

    let mut violations = Vec::new();
    let mut flag = |kind, under, a: f64, b: f64| {
        if b > DIVERGENCE_RATIO * a && b - a > 1e-12 {
            violations.push(Violation {
                kind,
                under,
                base: a,
                doubled: b,
            });
        }
    };
    for (under, other) in [("samples", more), ("box", wide)] {
        flag(
            ViolationKind::LipschitzDrift,
            under,
            base.lip_b,
            other.lip_b,
        );
        flag(
            ViolationKind::LipschitzVol,
            under,
            base.lip_sigma,
            other.lip_sigma,
        );
        flag(ViolationKind::Growth, under, base.growth, other.growth);
    }
    Ok(AssumptionReport {
        lipschitz_estimate_b: base.lip_b,
        lipschitz_estimate_sigma: base.lip_sigma,
        growth_estimate_fg: base.growth,
        violations,
    })
}
