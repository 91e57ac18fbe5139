use std::collections::BTreeMap;

use crate::model::StoppingProblem;
use crate::scalar::{Rational, Scalar};

use super::LatticeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Two-branch recombining tree, `d = 1`.
    Binomial,
    /// Three-branch recombining tree, `d = 1`.
    Trinomial,
    /// Product of two trinomial axes with a corner correction for the
    /// cross covariance, `d = 2`.
    TensorTrinomial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainNode<S> {
    pub state: Vec<S>,
    /// `(index in the next layer, probability)`; empty on the last layer.
    pub children: Vec<(usize, S)>,
}

/// Discrete-time, finite-state approximation of `X` started at `(t0, x0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainApprox<S> {
    pub d: usize,
    pub t0: S,
    pub dt: S,
    pub layers: Vec<Vec<ChainNode<S>>>,
    pub scheme: Option<Scheme>,
    /// Per layer, nodes per dimension when the layer is a tensor grid
    /// stored row-major (`d = 2`), or `[len]` for `d = 1` layers sorted by state.
    pub shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> ChainApprox<S> {
    pub fn n_steps(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn time(&self, layer: usize) -> S {
        self.t0.clone() + self.dt.clone() * S::from_usize(layer)
    }

    pub fn node(&self, layer: usize, i: usize) -> &ChainNode<S> {
        &self.layers[layer][i]
    }

    pub fn n_nodes(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Checks that probabilities are in `[0, 1]`, sum to one, and that child
    /// indices exist.
    pub fn validate(&self) -> Result<(), LatticeError> {
        let tol = if S::is_exact() { 0.0 } else { 1e-12 };
        for (k, layer) in self.layers.iter().enumerate() {
            let last = k + 1 == self.layers.len();
            for (i, n) in layer.iter().enumerate() {
                if last {
                    if !n.children.is_empty() {
                        return Err(LatticeError::Invalid(format!(
                            "terminal node {i} has children"
                        )));
                    }
                    continue;
                }
                let mut sum = S::zero();
                for (c, p) in &n.children {
                    if *c >= self.layers[k + 1].len() || *p < S::zero() || *p > S::one() {
                        return Err(LatticeError::Stability {
                            layer: k,
                            node: i,
                            prob: p.to_f64(),
                        });
                    }
                    sum = sum + p.clone();
                }
                if (sum.to_f64() - 1.0).abs() > tol || (S::is_exact() && sum != S::one()) {
                    return Err(LatticeError::Invalid(format!(
                        "probabilities at layer {k} node {i} sum to {}",
                        sum.to_f64()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Gains seen by backward induction on a chain.
pub trait ChainGains<S> {
    /// Gain accrued over one step from `state` at time `t` (`f * dt`).
    fn running(&self, t: &S, dt: &S, state: &[S]) -> S;
    fn terminal(&self, state: &[S]) -> S;
}

impl ChainGains<f64> for StoppingProblem {
    fn running(&self, t: &f64, dt: &f64, state: &[f64]) -> f64 {
        self.f(*t, state) * dt
    }
    fn terminal(&self, state: &[f64]) -> f64 {
        self.g(state)
    }
}

/// Gains given by closures, for exact chains.
pub struct FnGains<F, G> {
    /// `f(t, x)`, multiplied by `dt` on use.
    pub running: F,
    pub terminal: G,
}

impl<S, F, G> ChainGains<S> for FnGains<F, G>
where
    S: Scalar,
    F: Fn(&S, &[S]) -> S,
    G: Fn(&[S]) -> S,
{
    fn running(&self, t: &S, dt: &S, state: &[S]) -> S {
        (self.running)(t, state) * dt.clone()
    }
    fn terminal(&self, state: &[S]) -> S {
        (self.terminal)(state)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Axis {
    Additive { origin: f64, h: f64 },
    Log { origin: f64, h: f64 },
}

impl Axis {
    #[inline]
    pub(crate) fn point(&self, j: i64) -> f64 {
        match *self {
            Axis::Additive { origin, h } => origin + j as f64 * h,
            Axis::Log { origin, h } => origin * (j as f64 * h).exp(),
        }
    }
}

enum VolShape {
    Constant(f64),
    Proportional(f64),
    Other(f64),
}

/// Probes `sqrt(a_ii)` around `x0` to choose additive or logarithmic spacing.
fn vol_shape(p: &StoppingProblem, t0: f64, x0: &[f64], i: usize) -> VolShape {
    let d = p.dim();
    let delta = (0.25 * x0[i].abs()).max(0.5);
    let probes: Vec<f64> = [-1.0, -0.5, 0.0, 0.5, 1.0]
        .iter()
        .map(|s| x0[i] + s * delta)
        .collect();
    let sig: Vec<(f64, f64)> = probes
        .iter()
        .map(|&xi| {
            let mut x = x0.to_vec();
            x[i] = xi;
            (xi, p.diffusion(t0, &x)[i * d + i].max(0.0).sqrt())
        })
        .collect();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1e-300);
    let s0 = sig[2].1;
    if sig.iter().all(|(_, s)| close(*s, s0)) {
        return VolShape::Constant(s0);
    }
    if sig.iter().all(|(x, _)| *x != 0.0) {
        let nu = sig[2].1 / sig[2].0.abs();
        if sig.iter().all(|(x, s)| close(s / x.abs(), nu)) {
            return VolShape::Proportional(nu);
        }
    }
    VolShape::Other(sig.iter().map(|(_, s)| *s).fold(0.0, f64::max))
}

/// Lattice layout and local transition rule of a recombining scheme.
pub(crate) struct Geometry {
    pub scheme: Scheme,
    pub axes: Vec<Axis>,
    pub t0: f64,
    pub dt: f64,
}

impl Geometry {
    pub(crate) fn new(
        p: &StoppingProblem,
        t0: f64,
        x0: &[f64],
        n_steps: usize,
        scheme: Scheme,
    ) -> Result<Self, LatticeError> {
        let d = p.dim();
        if x0.len() != d {
            return Err(LatticeError::Invalid(format!(
                "x0 has length {}, d = {d}",
                x0.len()
            )));
        }
        if n_steps == 0 {
            return Err(LatticeError::Invalid("n_steps must be at least 1".into()));
        }
        if !(t0 >= 0.0 && t0 < p.horizon()) {
            return Err(LatticeError::Invalid(format!("t0 = {t0} outside [0, T)")));
        }
        match (scheme, d) {
            (Scheme::Binomial | Scheme::Trinomial, 1) | (Scheme::TensorTrinomial, 2) => {}
            _ => {
                return Err(LatticeError::Unsupported(format!(
                    "{scheme:?} scheme with d = {d}; binomial/trinomial need d = 1, tensor-trinomial d = 2"
                )))
            }
        }
        let dt = (p.horizon() - t0) / n_steps as f64;
        // tensor grids use a tighter spacing so the corner correction stays
        // admissible for correlations up to 2/3
        let stretch = match scheme {
            Scheme::Binomial => 1.0,
            Scheme::Trinomial => 3f64.sqrt(),
            Scheme::TensorTrinomial => 1.5f64.sqrt(),
        };
        let mut axes = Vec::with_capacity(d);
        for i in 0..d {
            let axis = match vol_shape(p, t0, x0, i) {
                VolShape::Constant(s) => {
                    let s = if s > 0.0 { s } else { 1.0 };
                    Axis::Additive {
                        origin: x0[i],
                        h: stretch * s * dt.sqrt(),
                    }
                }
                VolShape::Proportional(nu) => Axis::Log {
                    origin: x0[i],
                    h: stretch * nu * dt.sqrt(),
                },
                VolShape::Other(s_max) => {
                    if scheme == Scheme::Binomial {
                        return Err(LatticeError::Unsupported(
                            "binomial scheme needs constant or proportional volatility; use trinomial".into(),
                        ));
                    }
                    let s = if s_max > 0.0 { s_max } else { 1.0 };
                    Axis::Additive {
                        origin: x0[i],
                        h: stretch * s * dt.sqrt(),
                    }
                }
            };
            axes.push(axis);
        }
        Ok(Geometry {
            scheme,
            axes,
            t0,
            dt,
        })
    }

    /// Nodes per dimension on layer `k`.
    #[inline]
    pub(crate) fn axis_len(&self, k: usize) -> usize {
        match self.scheme {
            Scheme::Binomial => k + 1,
            _ => 2 * k + 1,
        }
    }

    /// Lattice offset of axis index `i` on layer `k`.
    #[inline]
    pub(crate) fn offset(&self, k: usize, i: usize) -> i64 {
        match self.scheme {
            Scheme::Binomial => 2 * i as i64 - k as i64,
            _ => i as i64 - k as i64,
        }
    }

    #[inline]
    pub(crate) fn coord(&self, dim: usize, k: usize, i: usize) -> f64 {
        self.axes[dim].point(self.offset(k, i))
    }

    /// One-dimensional branch probabilities at axis index `i` of layer `k`
    /// for drift `b` and variance rate `a`: `[down, up]` or `[down, mid, up]`,
    /// with children at axis indices `i, i+1 (, i+2)` of layer `k+1`.
    pub(crate) fn branch_1d(
        &self,
        dim: usize,
        k: usize,
        i: usize,
        b: f64,
        a: f64,
        out: &mut [f64; 3],
    ) -> Result<usize, f64> {
        let j = self.offset(k, i);
        let ax = self.axes[dim];
        let x = ax.point(j);
        let dt = self.dt;
        let m = b * dt;
        let check = |p: f64| -> Result<f64, f64> {
            if p.is_nan() || !(-1e-13..=1.0 + 1e-13).contains(&p) {
                Err(p)
            } else {
                Ok(p.clamp(0.0, 1.0))
            }
        };
        match self.scheme {
            Scheme::Binomial => {
                let du = ax.point(j + 1) - x;
                let dd = ax.point(j - 1) - x;
                let up = check((m - dd) / (du - dd))?;
                out[0] = 1.0 - up;
                out[1] = up;
                Ok(2)
            }
            _ => {
                let du = ax.point(j + 1) - x;
                let dd = ax.point(j - 1) - x;
                let s = a * dt + m * m;
                let up = check((m * dd - s) / (du * (dd - du)))?;
                let down = check((s - du * m) / (dd * (dd - du)))?;
                let mid = check(1.0 - up - down)?;
                let total = up + mid + down;
                out[0] = down / total;
                out[1] = mid / total;
                out[2] = up / total;
                Ok(3)
            }
        }
    }

    /// Builds the explicit chain.
    pub(crate) fn build(
        &self,
        p: &StoppingProblem,
        n_steps: usize,
    ) -> Result<ChainApprox<f64>, LatticeError> {
        let d = self.axes.len();
        let mut layers = Vec::with_capacity(n_steps + 1);
        let mut shapes = Vec::with_capacity(n_steps + 1);
        let mut b = vec![0.0; d];
        for k in 0..=n_steps {
            let n = self.axis_len(k);
            let t = self.t0 + k as f64 * self.dt;
            let last = k == n_steps;
            let mut layer = Vec::new();
            if d == 1 {
                shapes.push(vec![n]);
                for i in 0..n {
                    let x = vec![self.coord(0, k, i)];
                    let mut children = Vec::new();
                    if !last {
                        p.drift_into(t, &x, &mut b);
                        let a = p.diffusion(t, &x)[0];
                        if !(b[0].is_finite() && a.is_finite()) {
                            return Err(LatticeError::NonFinite { layer: k, node: i });
                        }
                        let mut pr = [0.0; 3];
                        let nb = self.branch_1d(0, k, i, b[0], a, &mut pr).map_err(|prob| {
                            LatticeError::Stability {
                                layer: k,
                                node: i,
                                prob,
                            }
                        })?;
                        children = (0..nb).map(|c| (i + c, pr[c])).collect();
                    }
                    layer.push(ChainNode { state: x, children });
                }
            } else {
                shapes.push(vec![n, n]);
                let n_next = self.axis_len(k + 1);
                for i1 in 0..n {
                    for i2 in 0..n {
                        let node = i1 * n + i2;
                        let x = vec![self.coord(0, k, i1), self.coord(1, k, i2)];
                        let mut children = Vec::new();
                        if !last {
                            p.drift_into(t, &x, &mut b);
                            let a = p.diffusion(t, &x);
                            if b.iter().chain(&a).any(|v| !v.is_finite()) {
                                return Err(LatticeError::NonFinite { layer: k, node });
                            }
                            let stab = |prob| LatticeError::Stability {
                                layer: k,
                                node,
                                prob,
                            };
                            let (mut p1, mut p2) = ([0.0; 3], [0.0; 3]);
                            self.branch_1d(0, k, i1, b[0], a[0], &mut p1)
                                .map_err(stab)?;
                            self.branch_1d(1, k, i2, b[1], a[3], &mut p2)
                                .map_err(stab)?;
                            let span = |dim: usize, i: usize| {
                                let j = self.offset(k, i);
                                self.axes[dim].point(j + 1) - self.axes[dim].point(j - 1)
                            };
                            let kappa = a[1] * self.dt / (span(0, i1) * span(1, i2));
                            for c1 in 0..3 {
                                for c2 in 0..3 {
                                    let sign = (c1 as f64 - 1.0) * (c2 as f64 - 1.0);
                                    let q = p1[c1] * p2[c2] + kappa * sign;
                                    if !(-1e-13..=1.0 + 1e-13).contains(&q) {
                                        return Err(stab(q));
                                    }
                                    children
                                        .push(((i1 + c1) * n_next + (i2 + c2), q.clamp(0.0, 1.0)));
                                }
                            }
                        }
                        layer.push(ChainNode { state: x, children });
                    }
                }
            }
            layers.push(layer);
        }
        let mut chain = ChainApprox {
            d,
            t0: self.t0,
            dt: self.dt,
            layers,
            scheme: Some(self.scheme),
            shapes,
        };
        // 1-d log axes with a negative origin run in decreasing order
        if d == 1
            && chain
                .layers
                .iter()
                .any(|l| l.len() > 1 && l[0].state[0] > l[1].state[0])
        {
            chain = reverse_1d(chain);
        }
        Ok(chain)
    }
}

fn reverse_1d(mut c: ChainApprox<f64>) -> ChainApprox<f64> {
    let lens: Vec<usize> = c.layers.iter().map(Vec::len).collect();
    for (k, layer) in c.layers.iter_mut().enumerate() {
        layer.reverse();
        if k + 1 < lens.len() {
            for n in layer.iter_mut() {
                for (child, _) in n.children.iter_mut() {
                    *child = lens[k + 1] - 1 - *child;
                }
                n.children.reverse();
            }
        }
    }
    c
}

/// Worst per-node deviation of the chain's conditional moments from the
/// diffusion's `b dt` and `sigma sigma^T dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentErrors {
    pub mean: f64,
    pub covariance: f64,
    /// `max |Var[dX] / (a dt) - 1|` over nodes with `a > 0`.
    pub relative_variance: f64,
}

impl ChainApprox<f64> {
    /// Recombining lattice rooted at `(t0, x0)` with locally moment-matched
    /// transition probabilities.
    pub fn build(
        p: &StoppingProblem,
        t0: f64,
        x0: &[f64],
        n_steps: usize,
        scheme: Scheme,
    ) -> Result<Self, LatticeError> {
        Geometry::new(p, t0, x0, n_steps, scheme)?.build(p, n_steps)
    }

    pub fn moment_errors(&self, p: &StoppingProblem) -> MomentErrors {
        let d = self.d;
        let mut out = MomentErrors {
            mean: 0.0,
            covariance: 0.0,
            relative_variance: 0.0,
        };
        for k in 0..self.n_steps() {
            let t = self.time(k);
            for node in &self.layers[k] {
                let x = &node.state;
                let b = p.drift(t, x);
                let a = p.diffusion(t, x);
                let mut mean = vec![0.0; d];
                for (c, pr) in &node.children {
                    let y = &self.layers[k + 1][*c].state;
                    for i in 0..d {
                        mean[i] += pr * (y[i] - x[i]);
                    }
                }
                for i in 0..d {
                    out.mean = out.mean.max((mean[i] - b[i] * self.dt).abs());
                }
                for i in 0..d {
                    for j in 0..d {
                        let cov: f64 = node
                            .children
                            .iter()
                            .map(|(c, pr)| {
                                let y = &self.layers[k + 1][*c].state;
                                pr * (y[i] - x[i] - mean[i]) * (y[j] - x[j] - mean[j])
                            })
                            .sum();
                        let target = a[i * d + j] * self.dt;
                        out.covariance = out.covariance.max((cov - target).abs());
                        if i == j && target > 0.0 {
                            out.relative_variance =
                                out.relative_variance.max((cov / target - 1.0).abs());
                        }
                    }
                }
            }
        }
        out
    }
}

impl ChainApprox<Rational> {
    /// Recombining exact chain generated by a transition kernel: from each
    /// state the kernel lists `(next state, probability)`. Equal states in a
    /// layer are merged, and layers are sorted by state.
    pub fn from_kernel<K>(
        x0: Vec<Rational>,
        t0: Rational,
        dt: Rational,
        n_steps: usize,
        mut kernel: K,
    ) -> Result<Self, LatticeError>
    where
        K: FnMut(usize, &[Rational]) -> Vec<(Vec<Rational>, Rational)>,
    {
        let d = x0.len();
        if d == 0 || n_steps == 0 {
            return Err(LatticeError::Invalid("need d >= 1 and n_steps >= 1".into()));
        }
        let mut layers: Vec<Vec<ChainNode<Rational>>> = vec![vec![ChainNode {
            state: x0,
            children: Vec::new(),
        }]];
        for k in 0..n_steps {
            let mut next: BTreeMap<Vec<Rational>, usize> = BTreeMap::new();
            let mut raw: Vec<Vec<(Vec<Rational>, Rational)>> = Vec::new();
            for node in &layers[k] {
                let branches = kernel(k, &node.state);
                for (y, _) in &branches {
                    if y.len() != d {
                        return Err(LatticeError::Invalid("kernel changed the dimension".into()));
                    }
                    next.insert(y.clone(), 0);
                }
                raw.push(branches);
            }
            for (i, v) in next.values_mut().enumerate() {
                *v = i;
            }
            for (node, branches) in layers[k].iter_mut().zip(raw) {
                let mut merged: BTreeMap<usize, Rational> = BTreeMap::new();
                for (y, pr) in branches {
                    *merged
                        .entry(next[&y])
                        .or_insert_with(|| Rational::from_integer(0.into())) += pr;
                }
                node.children = merged.into_iter().collect();
            }
            layers.push(
                next.into_keys()
                    .map(|state| ChainNode {
                        state,
                        children: Vec::new(),
                    })
                    .collect(),
            );
        }
        let shapes = layers.iter().map(|l| vec![l.len()]).collect();
        let chain = ChainApprox {
            d,
            t0,
            dt,
            layers,
            scheme: None,
            shapes,
        };
        chain.validate()?;
        Ok(chain)
    }

    /// Homogeneous additive walk: every node moves by each `(step, prob)`.
    pub fn walk(
        x0: Rational,
        t0: Rational,
        dt: Rational,
        n_steps: usize,
        steps: &[(Rational, Rational)],
    ) -> Result<Self, LatticeError> {
        Self::from_kernel(vec![x0], t0, dt, n_steps, |_, x| {
            steps
                .iter()
                .map(|(s, pr)| (vec![x[0].clone() + s.clone()], pr.clone()))
                .collect()
        })
    }
}
