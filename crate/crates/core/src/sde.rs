//! Seeded Euler–Maruyama simulation with retained Brownian increments.
//!
//! Each path draws its normals from its own ChaCha stream (`seed`, stream =
//! path index), so the bundle is a pure function of the inputs and the seed,
//! whatever the execution policy.

use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::exec::{self, Execution};
use crate::model::StoppingProblem;
use crate::scalar::format_f64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SdeError {
    #[error("path {path} diverged at step {step}")]
    Divergence { path: usize, step: usize },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Simulated paths on a shared uniform grid.
///
/// `states` is `[n_paths][n_steps + 1][d]` and `increments` is
/// `[n_paths][n_steps][m]`, both flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub t0: f64,
    pub times: Vec<f64>,
    pub d: usize,
    pub m: usize,
    pub n_paths: usize,
    pub states: Vec<f64>,
    pub increments: Vec<f64>,
    pub seed: u64,
    /// Per-path step at which the path was (re)started; before it the state is
    /// frozen at the start value. All zero for a fresh simulation.
    pub start_steps: Vec<usize>,
}

impl PathBundle {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    /// All states of one path, `(n_steps + 1) * d` values.
    pub fn path(&self, i: usize) -> &[f64] {
        let len = self.times.len() * self.d;
        &self.states[i * len..(i + 1) * len]
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let base = (path * self.times.len() + step) * self.d;
        &self.states[base..base + self.d]
    }

    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let base = (path * self.n_steps() + step) * self.m;
        &self.increments[base..base + self.m]
    }

    /// CSV with header `path,step,time,x_1..x_d`, rows ordered by path then step.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "path,step,time")?;
        for i in 1..=self.d {
            write!(w, ",x_{i}")?;
        }
        writeln!(w)?;
        for p in 0..self.n_paths {
            for (k, t) in self.times.iter().enumerate() {
                write!(w, "{p},{k},{}", format_f64(*t))?;
                for x in self.state(p, k) {
                    write!(w, ",{}", format_f64(*x))?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

pub fn uniform_grid(t0: f64, horizon: f64, n_steps: usize) -> Vec<f64> {
    let dt = (horizon - t0) / n_steps as f64;
    (0..=n_steps)
        .map(|k| {
            if k == n_steps {
                horizon
            } else {
                t0 + k as f64 * dt
            }
        })
        .collect()
}

/// One Euler step `x + b dt + sigma dW`, written into `next`.
#[inline]
fn euler_step(
    p: &StoppingProblem,
    t: f64,
    dt: f64,
    x: &[f64],
    dw: &[f64],
    b: &mut [f64],
    s: &mut [f64],
    next: &mut [f64],
) {
    let m = dw.len();
    p.drift_into(t, x, b);
    p.vol_into(t, x, s);
    for i in 0..x.len() {
        let mut noise = 0.0;
        for k in 0..m {
            noise += s[i * m + k] * dw[k];
        }
        next[i] = x[i] + b[i] * dt + noise;
    }
}

/// Integrates one path from `start` using stored increments, writing steps
/// `start+1..=n_steps` in place. Returns the first non-finite step, if any.
fn integrate_tail(
    p: &StoppingProblem,
    times: &[f64],
    path_states: &mut [f64],
    path_incs: &[f64],
    start: usize,
) -> Option<usize> {
    let (d, m) = (p.dim(), p.noise_dim());
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * m];
    for k in start..times.len() - 1 {
        let dt = times[k + 1] - times[k];
        let (head, tail) = path_states.split_at_mut((k + 1) * d);
        let x = &head[k * d..];
        let next = &mut tail[..d];
        euler_step(
            p,
            times[k],
            dt,
            x,
            &path_incs[k * m..(k + 1) * m],
            &mut b,
            &mut s,
            next,
        );
        if next.iter().any(|v| !v.is_finite()) {
            return Some(k + 1);
        }
    }
    None
}

pub fn simulate(
    p: &StoppingProblem,
    t0: f64,
    x0: &[f64],
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle, SdeError> {
    simulate_with(p, t0, x0, n_steps, n_paths, seed, Execution::default())
}

/// [`simulate`] with an explicit execution policy.
pub fn simulate_with(
    p: &StoppingProblem,
    t0: f64,
    x0: &[f64],
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    exec: Execution,
) -> Result<PathBundle, SdeError> {
    let (d, m) = (p.dim(), p.noise_dim());
    if x0.len() != d {
        return Err(SdeError::Dimension(format!(
            "x0 has length {}, d = {d}",
            x0.len()
        )));
    }
    if !(t0 >= 0.0 && t0 < p.horizon()) {
        return Err(SdeError::Invalid(format!("t0 = {t0} outside [0, T)")));
    }
    if n_steps == 0 || n_paths == 0 {
        return Err(SdeError::Invalid(
            "n_steps and n_paths must be at least 1".into(),
        ));
    }
    let times = uniform_grid(t0, p.horizon(), n_steps);
    let sqrt_dt = ((p.horizon() - t0) / n_steps as f64).sqrt();
    let path_len = (n_steps + 1) * d;
    let mut states = vec![0.0; n_paths * path_len];
    let mut increments = vec![0.0; n_paths * n_steps * m];

    // normals first (one stream per path), then the recursion
    exec::for_each_chunk_mut(exec, &mut increments, n_steps * m, |i, incs| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for z in incs.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *z = n * sqrt_dt;
        }
    });
    let failures = std::sync::Mutex::new(Vec::new());
    exec::for_each_chunk_mut(exec, &mut states, path_len, |i, path| {
        path[..d].copy_from_slice(x0);
        let incs = &increments[i * n_steps * m..(i + 1) * n_steps * m];
        if let Some(step) = integrate_tail(p, &times, path, incs, 0) {
            failures.lock().unwrap().push((i, step));
        }
    });
    if let Some(&(path, step)) = failures.into_inner().unwrap().iter().min() {
        return Err(SdeError::Divergence { path, step });
    }
    Ok(PathBundle {
        t0,
        times,
        d,
        m,
        n_paths,
        states,
        increments,
        seed,
        start_steps: vec![0; n_paths],
    })
}

/// Restarts every path at `stop_indices[i]` from its own state there,
/// re-integrating with the retained increments. States before the restart
/// step are frozen at the restart value.
pub fn restart_at(
    p: &StoppingProblem,
    bundle: &PathBundle,
    stop_indices: &[usize],
) -> Result<PathBundle, SdeError> {
    if stop_indices.len() != bundle.n_paths {
        return Err(SdeError::Dimension(format!(
            "{} stop indices for {} paths",
            stop_indices.len(),
            bundle.n_paths
        )));
    }
    if let Some((i, k)) = stop_indices
        .iter()
        .enumerate()
        .find(|(_, &k)| k > bundle.n_steps())
    {
        return Err(SdeError::Dimension(format!(
            "stop index {k} for path {i} exceeds {} steps",
            bundle.n_steps()
        )));
    }
    let d = bundle.d;
    let path_len = bundle.times.len() * d;
    let inc_len = bundle.n_steps() * bundle.m;
    let mut states = vec![0.0; bundle.states.len()];
    let failures = std::sync::Mutex::new(Vec::new());
    exec::for_each_chunk_mut(Execution::default(), &mut states, path_len, |i, path| {
        let k = stop_indices[i];
        let start = bundle.state(i, k);
        for step in 0..=k {
            path[step * d..(step + 1) * d].copy_from_slice(start);
        }
        let incs = &bundle.increments[i * inc_len..(i + 1) * inc_len];
        if let Some(step) = integrate_tail(p, &bundle.times, path, incs, k) {
            failures.lock().unwrap().push((i, step));
        }
    });
    if let Some(&(path, step)) = failures.into_inner().unwrap().iter().min() {
        return Err(SdeError::Divergence { path, step });
    }
    Ok(PathBundle {
        states,
        start_steps: stop_indices.to_vec(),
        ..bundle.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentCheck {
    pub sup_moment: f64,
    pub bound_ratio: f64,
}

/// Mean over paths of `max_k |X_k|^p`, and its ratio to `1 + |x0|^p`.
pub fn moment_check(bundle: &PathBundle, p_exponent: u32) -> Result<MomentCheck, SdeError> {
    if p_exponent < 2 {
        return Err(SdeError::Invalid(format!(
            "moment exponent must be >= 2, got {p_exponent}"
        )));
    }
    let d = bundle.d;
    let pw = |x: &[f64]| {
        x.iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .powi(p_exponent as i32)
    };
    let total = exec::chunked_reduce(
        Execution::default(),
        bundle.n_paths,
        || 0.0,
        |acc, i| {
            let path = bundle.path(i);
            acc + path.chunks(d).map(pw).fold(0.0, f64::max)
        },
        |a, b| a + b,
    );
    let sup_moment = total / bundle.n_paths as f64;
    let x0 = bundle.state(0, 0);
    Ok(MomentCheck {
        sup_moment,
        bound_ratio: sup_moment / (1.0 + pw(x0)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelKind, ScalarFn};

    fn bachelier(mu: f64, s: f64) -> StoppingProblem {
        StoppingProblem::preset(
            ModelKind::Bachelier { mu, s },
            1,
            1.0,
            ScalarFn::Const(0.0),
            ScalarFn::Const(0.0),
        )
        .unwrap()
    }

    fn gbm() -> StoppingProblem {
        StoppingProblem::preset(
            ModelKind::Gbm { mu: 0.05, nu: 0.2 },
            1,
            1.0,
            ScalarFn::Const(0.0),
            ScalarFn::Const(0.0),
        )
        .unwrap()
    }

    #[test]
    fn frozen_dynamics() {
        let b = simulate(&bachelier(0.0, 0.0), 0.0, &[1.5], 10, 4, 1).unwrap();
        assert!(b.states.iter().all(|&x| x == 1.5));
    }

    #[test]
    fn constant_drift_is_exact() {
        let b = simulate(&bachelier(1.0, 0.0), 0.0, &[0.0], 8, 3, 1).unwrap();
        for i in 0..3 {
            assert_eq!(b.state(i, 8)[0], 1.0);
        }
        assert_eq!(*b.times.last().unwrap(), 1.0);
    }

    #[test]
    fn gbm_terminal_mean_matches_closed_form() {
        let n = 10_000;
        let b = simulate(&gbm(), 0.0, &[100.0], 50, n, 2024).unwrap();
        let xs: Vec<f64> = (0..n).map(|i| b.state(i, 50)[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let exact = 100.0 * 0.05f64.exp();
        assert!(
            (mean - exact).abs() < 3.0 * se,
            "mean {mean} exact {exact} se {se}"
        );
    }

    #[test]
    fn same_seed_same_bits_under_both_policies() {
        let p = gbm();
        let a = simulate_with(&p, 0.0, &[100.0], 20, 300, 7, Execution::Sequential).unwrap();
        let b = simulate_with(&p, 0.0, &[100.0], 20, 300, 7, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let c = simulate_with(&p, 0.0, &[100.0], 20, 300, 8, Execution::Parallel).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn increments_reproduce_states() {
        let p = gbm();
        let b = simulate(&p, 0.25, &[100.0], 12, 5, 3).unwrap();
        assert_eq!(b.times[0], 0.25);
        for i in 0..5 {
            let mut x = 100.0;
            for k in 0..12 {
                let t = b.times[k];
                let dt = b.times[k + 1] - t;
                x = x + 0.05 * x * dt + 0.2 * x * b.increment(i, k)[0];
                assert_eq!(x, b.state(i, k + 1)[0]);
            }
        }
    }

    #[test]
    fn restart_identity_and_flow_property() {
        let p = gbm();
        let b = simulate(&p, 0.0, &[100.0], 16, 40, 5).unwrap();
        let same = restart_at(&p, &b, &vec![0; 40]).unwrap();
        assert_eq!(same.states, b.states);

        let last = restart_at(&p, &b, &vec![16; 40]).unwrap();
        for i in 0..40 {
            assert_eq!(last.state(i, 16), b.state(i, 16));
        }

        let ks: Vec<usize> = (0..40).map(|i| (i * 7) % 17).collect();
        let r = restart_at(&p, &b, &ks).unwrap();
        let mut max_gap = 0.0f64;
        for (i, &k) in ks.iter().enumerate() {
            for step in k..=16 {
                max_gap = max_gap.max((r.state(i, step)[0] - b.state(i, step)[0]).abs());
            }
            for step in 0..k {
                assert_eq!(r.state(i, step), b.state(i, k));
            }
        }
        assert_eq!(max_gap, 0.0);
        assert!(restart_at(&p, &b, &vec![17; 40]).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let p = StoppingProblem::new(
            1,
            1,
            1.0,
            vec![ScalarFn::parse("x^3").unwrap()],
            vec![ScalarFn::Const(0.0)],
            ScalarFn::Const(0.0),
            ScalarFn::Const(0.0),
        )
        .unwrap();
        let err = simulate(&p, 0.0, &[10.0], 20, 2, 0).unwrap_err();
        assert!(matches!(err, SdeError::Divergence { path: 0, .. }), "{err}");
    }

    #[test]
    fn moments() {
        let frozen = simulate(&bachelier(0.0, 0.0), 0.0, &[2.0], 4, 3, 0).unwrap();
        let m = moment_check(&frozen, 2).unwrap();
        assert_eq!(m.sup_moment, 4.0);
        assert_eq!(m.bound_ratio, 4.0 / 5.0);

        let p1 = bachelier(0.0, 1.0);
        let p2 = StoppingProblem::preset(
            ModelKind::Bachelier { mu: 0.0, s: 1.0 },
            1,
            2.0,
            ScalarFn::Const(0.0),
            ScalarFn::Const(0.0),
        )
        .unwrap();
        let short = simulate(&p1, 0.0, &[0.0], 100, 2000, 4).unwrap();
        let long = simulate(&p2, 0.0, &[0.0], 200, 2000, 4).unwrap();
        assert!(
            moment_check(&long, 2).unwrap().sup_moment
                > moment_check(&short, 2).unwrap().sup_moment
        );
        assert!(moment_check(&short, 1).is_err());
    }

    #[test]
    fn csv_layout() {
        let b = simulate(&bachelier(0.0, 1.0), 0.0, &[0.0], 2, 2, 1).unwrap();
        let mut out = Vec::new();
        b.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path,step,time,x_1");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[1].starts_with("0,0,0.0000000000000000e0,"));
    }
}
