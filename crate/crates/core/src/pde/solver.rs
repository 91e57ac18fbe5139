use serde::{Deserialize, Serialize};

use crate::exec::{map_indexed, Execution};
use crate::model::StoppingProblem;

use super::grid::{BoundaryMode, Grid};
use super::operator::{assemble, Stencil};
use super::PdeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PdeScheme {
    /// Projected successive over-relaxation.
    #[default]
    Psor,
    /// Howard iteration on the active set; direct tridiagonal solve in 1-d.
    PolicyIteration,
    /// Explicit Euler step followed by projection onto `v >= g`.
    ExplicitProjection,
}

impl std::str::FromStr for PdeScheme {
    type Err = PdeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "psor" => Ok(PdeScheme::Psor),
            "policy-iteration" => Ok(PdeScheme::PolicyIteration),
            "explicit-projection" => Ok(PdeScheme::ExplicitProjection),
            _ => Err(PdeError::Invalid(format!(
                "unknown scheme '{s}' (psor | policy-iteration | explicit-projection)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub scheme: PdeScheme,
    /// Implicit weight; 0.5 is Crank-Nicolson. Ignored by explicit projection.
    pub theta: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// PSOR relaxation factor in (0, 2).
    pub omega: f64,
    /// Fully implicit steps taken first (from the terminal layer).
    pub rannacher_steps: usize,
    pub exec: Execution,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            scheme: PdeScheme::Psor,
            theta: 0.5,
            tol: 1e-10,
            max_iter: 20_000,
            omega: 1.5,
            rannacher_steps: 2,
            exec: Execution::Parallel,
        }
    }
}

/// Discrete solution on the whole space-time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeSurface {
    pub grid: Grid,
    /// `values[k][node]` at time `grid.time(k)`.
    pub values: Vec<Vec<f64>>,
    pub obstacle: Vec<f64>,
    pub active: Vec<Vec<bool>>,
    /// Tolerance used for the active-set flag.
    pub tol: f64,
    /// Solver iterations per step (index `k` is the step `k+1 -> k`).
    pub iterations: Vec<usize>,
}

impl PdeSurface {
    /// Wraps externally computed values, e.g. an analytic solution; the
    /// active set is recomputed from `tol`.
    pub fn from_values(
        grid: Grid,
        values: Vec<Vec<f64>>,
        p: &StoppingProblem,
        tol: f64,
    ) -> Result<Self, PdeError> {
        if values.len() != grid.n_time + 1 || values.iter().any(|l| l.len() != grid.n_nodes()) {
            return Err(PdeError::Invalid(
                "value array does not match the grid".into(),
            ));
        }
        let obstacle = obstacle(p, &grid)?;
        let mut s = PdeSurface {
            iterations: vec![0; grid.n_time],
            active: Vec::new(),
            grid,
            values,
            obstacle,
            tol,
        };
        s.active = (0..s.values.len()).map(|k| s.active_layer(k)).collect();
        Ok(s)
    }

    /// `max|g|` over the grid, at least 1.
    pub fn scale(&self) -> f64 {
        self.obstacle.iter().fold(1.0f64, |m, g| m.max(g.abs()))
    }

    fn threshold(&self) -> f64 {
        self.tol.max(1e-12 * self.scale())
    }

    fn active_layer(&self, k: usize) -> Vec<bool> {
        let thr = self.threshold();
        self.values[k]
            .iter()
            .zip(&self.obstacle)
            .map(|(v, g)| v - g <= thr)
            .collect()
    }

    /// Multilinear interpolation at layer `k`; `None` outside the box.
    pub fn value_at(&self, k: usize, x: &[f64]) -> Option<f64> {
        self.grid.interpolate(&self.values[k], x)
    }
}

fn obstacle(p: &StoppingProblem, grid: &Grid) -> Result<Vec<f64>, PdeError> {
    (0..grid.n_nodes())
        .map(|n| {
            let x = grid.point(n);
            let g = p.g(&x);
            if g.is_finite() {
                Ok(g)
            } else {
                Err(PdeError::NonFinite { t: grid.horizon, x })
            }
        })
        .collect()
}

fn running(
    p: &StoppingProblem,
    grid: &Grid,
    t: f64,
    exec: Execution,
) -> Result<Vec<f64>, PdeError> {
    map_indexed(exec, grid.n_nodes(), |n| {
        let x = grid.point(n);
        let f = p.f(t, &x);
        if f.is_finite() {
            Ok(f)
        } else {
            Err(PdeError::NonFinite { t, x })
        }
    })
    .into_iter()
    .collect()
}

/// Boundary nodes per edge: (node, first inward, second inward).
fn edge_triples(grid: &Grid) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for dim in 0..grid.dim() {
        let n = grid.n_space[dim];
        for node in 0..grid.n_nodes() {
            let idx = grid.index(node);
            let (a, b) = if idx[dim] == 0 {
                (1, 2)
            } else if idx[dim] + 1 == n {
                (n - 2, n - 3)
            } else {
                continue;
            };
            let mut i1 = idx;
            let mut i2 = idx;
            i1[dim] = a;
            i2[dim] = b;
            out.push((node, grid.flat(i1), grid.flat(i2)));
        }
    }
    out
}

struct Boundary {
    mode: BoundaryMode,
    nodes: Vec<usize>,
    triples: Vec<(usize, usize, usize)>,
}

impl Boundary {
    fn new(grid: &Grid) -> Self {
        Boundary {
            mode: grid.boundary,
            nodes: (0..grid.n_nodes())
                .filter(|n| grid.is_boundary(*n))
                .collect(),
            triples: edge_triples(grid),
        }
    }

    fn apply(&self, v: &mut [f64], g: &[f64]) {
        match self.mode {
            BoundaryMode::DirichletG => {
                for &n in &self.nodes {
                    v[n] = g[n];
                }
            }
            BoundaryMode::LinearExtrapolation => {
                for &(n, a, b) in &self.triples {
                    v[n] = (2.0 * v[a] - v[b]).max(g[n]);
                }
            }
        }
    }
}

/// One backward step as an LCP: `A v >= r`, `v >= g`, complementarity.
struct Step<'a> {
    stencils: &'a [Option<Stencil>],
    /// `theta * dt`
    w: f64,
    r: &'a [f64],
    g: &'a [f64],
}

impl Step<'_> {
    fn diag(&self, st: &Stencil) -> f64 {
        1.0 - self.w * st.center
    }

    /// `(A v - r)_i` at an interior node.
    fn slack(&self, v: &[f64], i: usize, st: &Stencil) -> f64 {
        v[i] - self.w * st.apply(v, i) - self.r[i]
    }

    /// Natural LCP residual `max |min(A v - r, v - g)|` over interior nodes.
    fn residual(&self, v: &[f64]) -> f64 {
        self.stencils
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                s.as_ref()
                    .map(|st| self.slack(v, i, st).min(v[i] - self.g[i]).abs())
            })
            .fold(0.0, f64::max)
    }

    fn psor(
        &self,
        v: &mut [f64],
        bc: &Boundary,
        omega: f64,
        tol: f64,
        max_iter: usize,
    ) -> Result<usize, f64> {
        let mut res = f64::INFINITY;
        for it in 1..=max_iter {
            for (i, s) in self.stencils.iter().enumerate() {
                let Some(st) = s else { continue };
                let off = st.nbrs.iter().fold(0.0, |acc, (j, c)| acc + c * v[*j]);
                let y = (self.r[i] + self.w * off) / self.diag(st);
                v[i] = (v[i] + omega * (y - v[i])).max(self.g[i]);
            }
            bc.apply(v, self.g);
            res = self.residual(v);
            if res < tol {
                return Ok(it);
            }
        }
        Err(res)
    }

    fn policy(
        &self,
        v: &mut [f64],
        grid: &Grid,
        bc: &Boundary,
        cfg: &SolverConfig,
    ) -> Result<usize, f64> {
        let n = v.len();
        let mut fixed = vec![false; n];
        for it in 1..=cfg.max_iter {
            let next: Vec<bool> = (0..n)
                .map(|i| match &self.stencils[i] {
                    Some(st) => v[i] - self.g[i] < self.slack(v, i, st),
                    None => false,
                })
                .collect();
            // ties between the two rows can flip under rounding once the
            // LCP is solved, so a small residual also ends the iteration
            if it > 1 && (next == fixed || self.residual(v) < cfg.tol) {
                return Ok(it - 1);
            }
            fixed = next;
            if grid.dim() == 1 {
                self.thomas(v, &fixed, bc);
            } else {
                self.sor_linear(v, &fixed, bc, cfg)?;
            }
        }
        Err(self.residual(v))
    }

    /// Direct solve of the 1-d system with rows of `fixed` nodes replaced by
    /// `v = g`. Linear-extrapolation edges are substituted into their
    /// neighbour rows, then floored at `g`.
    fn thomas(&self, v: &mut [f64], fixed: &[bool], bc: &Boundary) {
        let n = v.len();
        let m = n - 2; // unknowns 1..=n-2
        let (mut lo, mut di, mut up, mut rhs) =
            (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        let extrap = bc.mode == BoundaryMode::LinearExtrapolation;
        for r in 0..m {
            let i = r + 1;
            if fixed[i] {
                di[r] = 1.0;
                rhs[r] = self.g[i];
                continue;
            }
            let st = self.stencils[i].as_ref().expect("interior node");
            di[r] = self.diag(st);
            rhs[r] = self.r[i];
            for &(j, c) in &st.nbrs {
                let a = -self.w * c;
                if j + 1 == i {
                    if j == 0 {
                        if extrap {
                            // v_0 = 2 v_1 - v_2
                            di[r] += 2.0 * a;
                            up[r] -= a;
                        } else {
                            rhs[r] -= a * self.g[0];
                        }
                    } else {
                        lo[r] += a;
                    }
                } else if j == n - 1 {
                    if extrap {
                        di[r] += 2.0 * a;
                        lo[r] -= a;
                    } else {
                        rhs[r] -= a * self.g[n - 1];
                    }
                } else {
                    up[r] += a;
                }
            }
        }
        // forward sweep
        for r in 1..m {
            let f = lo[r] / di[r - 1];
            di[r] -= f * up[r - 1];
            rhs[r] -= f * rhs[r - 1];
        }
        v[m] = rhs[m - 1] / di[m - 1];
        for r in (0..m - 1).rev() {
            v[r + 1] = (rhs[r] - up[r] * v[r + 2]) / di[r];
        }
        bc.apply(v, self.g);
    }

    fn sor_linear(
        &self,
        v: &mut [f64],
        fixed: &[bool],
        bc: &Boundary,
        cfg: &SolverConfig,
    ) -> Result<(), f64> {
        let inner = 0.1 * cfg.tol;
        for _ in 0..cfg.max_iter {
            let mut change = 0.0f64;
            for (i, s) in self.stencils.iter().enumerate() {
                let Some(st) = s else { continue };
                let new = if fixed[i] {
                    self.g[i]
                } else {
                    let off = st.nbrs.iter().fold(0.0, |acc, (j, c)| acc + c * v[*j]);
                    let y = (self.r[i] + self.w * off) / self.diag(st);
                    v[i] + cfg.omega * (y - v[i])
                };
                change = change.max((new - v[i]).abs());
                v[i] = new;
            }
            bc.apply(v, self.g);
            if change < inner {
                return Ok(());
            }
        }
        Err(self.residual(v))
    }
}

/// Backward θ-scheme for `max{v_t + L v + f, g - v} = 0`, `v(T) = g`.
pub fn solve_variational_inequality(
    p: &StoppingProblem,
    grid: &Grid,
    cfg: &SolverConfig,
) -> Result<PdeSurface, PdeError> {
    if p.dim() != grid.dim() {
        return Err(PdeError::Invalid(format!(
            "problem has d = {}, grid has d = {}",
            p.dim(),
            grid.dim()
        )));
    }
    if (grid.horizon - p.horizon()).abs() > 1e-12 * p.horizon().abs().max(1.0) {
        return Err(PdeError::Invalid(
            "grid horizon differs from the problem's T".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.theta) {
        return Err(PdeError::Invalid(format!(
            "theta must lie in [0, 1], got {}",
            cfg.theta
        )));
    }
    if !(cfg.omega > 0.0 && cfg.omega < 2.0) {
        return Err(PdeError::Invalid(format!(
            "omega must lie in (0, 2), got {}",
            cfg.omega
        )));
    }
    if !(cfg.tol > 0.0) || cfg.max_iter == 0 {
        return Err(PdeError::Invalid("need tol > 0 and max_iter >= 1".into()));
    }
    let n_t = grid.n_time;
    let dt = grid.dt();
    let g = obstacle(p, grid)?;
    let bc = Boundary::new(grid);
    let mut values = vec![Vec::new(); n_t + 1];
    values[n_t] = g.clone();
    let mut iterations = vec![0; n_t];
    let mut st_next = assemble(p, grid, grid.time(n_t), cfg.exec)?;
    let mut f_next = running(p, grid, grid.time(n_t), cfg.exec)?;
    for k in (0..n_t).rev() {
        let tk = grid.time(k);
        let st_k = assemble(p, grid, tk, cfg.exec)?;
        let f_k = running(p, grid, tk, cfg.exec)?;
        let v_next = &values[k + 1];
        let mut v = v_next.clone();
        if cfg.scheme == PdeScheme::ExplicitProjection {
            for (i, s) in st_next.iter().enumerate() {
                let Some(st) = s else { continue };
                if 1.0 + dt * st.center < 0.0 {
                    return Err(PdeError::Stability(format!(
                        "explicit step violates the CFL bound at node {i}: dt * |center| = {:.4} > 1",
                        -dt * st.center
                    )));
                }
                v[i] = (v_next[i] + dt * (st.apply(v_next, i) + f_next[i])).max(g[i]);
            }
            bc.apply(&mut v, &g);
            iterations[k] = 1;
        } else {
            let theta = if n_t - k <= cfg.rannacher_steps {
                1.0
            } else {
                cfg.theta
            };
            let r: Vec<f64> = map_indexed(cfg.exec, grid.n_nodes(), |i| match &st_next[i] {
                Some(st) => {
                    v_next[i]
                        + (1.0 - theta) * dt * st.apply(v_next, i)
                        + dt * (theta * f_k[i] + (1.0 - theta) * f_next[i])
                }
                None => 0.0,
            });
            let step = Step {
                stencils: &st_k,
                w: theta * dt,
                r: &r,
                g: &g,
            };
            bc.apply(&mut v, &g);
            let out = match cfg.scheme {
                PdeScheme::Psor => step.psor(&mut v, &bc, cfg.omega, cfg.tol, cfg.max_iter),
                _ => step.policy(&mut v, grid, &bc, cfg),
            };
            iterations[k] = out.map_err(|residual| PdeError::Convergence {
                step: k,
                residual,
                iterations: cfg.max_iter,
            })?;
        }
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(PdeError::NonFinite {
                t: tk,
                x: grid.point(i),
            });
        }
        values[k] = v;
        st_next = st_k;
        f_next = f_k;
    }
    let mut s = PdeSurface {
        grid: grid.clone(),
        values,
        obstacle: g,
        active: Vec::new(),
        tol: cfg.tol,
        iterations,
    };
    s.active = (0..=n_t).map(|k| s.active_layer(k)).collect();
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelKind, ScalarFn};

    fn bm(g: &str) -> StoppingProblem {
        StoppingProblem::preset(
            ModelKind::Bachelier { mu: 0.0, s: 1.0 },
            1,
            1.0,
            ScalarFn::Const(0.0),
            ScalarFn::parse(g).unwrap(),
        )
        .unwrap()
    }

    fn grid(n: usize, nt: usize) -> Grid {
        Grid::new(
            vec![-6.0],
            vec![6.0],
            vec![n],
            0.0,
            1.0,
            nt,
            BoundaryMode::DirichletG,
        )
        .unwrap()
    }

    #[test]
    fn quadratic_closed_form() {
        let p = bm("x^2");
        for scheme in [PdeScheme::Psor, PdeScheme::PolicyIteration] {
            let cfg = SolverConfig {
                scheme,
                ..Default::default()
            };
            let s = solve_variational_inequality(&p, &grid(121, 50), &cfg).unwrap();
            assert_eq!(s.values[50], s.obstacle);
            let v = s.value_at(0, &[0.0]).unwrap();
            assert!((v - 1.0).abs() < 1e-3, "{scheme:?}: {v}");
            assert!(s.active[0][1..120].iter().all(|a| !a));
        }
    }

    #[test]
    fn concave_obstacle_binds_everywhere() {
        let p = bm("4 - x^2");
        let s = solve_variational_inequality(&p, &grid(121, 50), &SolverConfig::default()).unwrap();
        assert!(s.active.iter().all(|l| l.iter().all(|a| *a)));
    }

    #[test]
    fn psor_and_policy_iteration_agree() {
        let p = StoppingProblem::preset(
            ModelKind::Gbm { mu: 0.06, nu: 0.2 },
            1,
            1.0,
            ScalarFn::Const(0.0),
            ScalarFn::parse("max(100 - x, 0)").unwrap(),
        )
        .unwrap();
        let grid = Grid::new(
            vec![0.0],
            vec![300.0],
            vec![151],
            0.0,
            1.0,
            50,
            BoundaryMode::DirichletG,
        )
        .unwrap();
        let tol = 1e-10;
        let a = solve_variational_inequality(
            &p,
            &grid,
            &SolverConfig {
                tol,
                ..Default::default()
            },
        )
        .unwrap();
        let b = solve_variational_inequality(
            &p,
            &grid,
            &SolverConfig {
                tol,
                scheme: PdeScheme::PolicyIteration,
                ..Default::default()
            },
        )
        .unwrap();
        let gap = a
            .values
            .iter()
            .flatten()
            .zip(b.values.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(gap <= 10.0 * tol * a.scale(), "gap {gap}");
        assert!(a.active[0].iter().any(|x| *x));
    }

    #[test]
    fn explicit_cfl() {
        let p = bm("x^2");
        let cfg = SolverConfig {
            scheme: PdeScheme::ExplicitProjection,
            ..Default::default()
        };
        assert!(matches!(
            solve_variational_inequality(&p, &grid(121, 10), &cfg),
            Err(PdeError::Stability(_))
        ));
        // dt / h^2 = (1/200) / 0.01 = 0.5
        let s = solve_variational_inequality(&p, &grid(121, 200), &cfg).unwrap();
        assert!((s.value_at(0, &[0.0]).unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn convergence_error_reports_residual() {
        let p = bm("x^2");
        let cfg = SolverConfig {
            max_iter: 1,
            ..Default::default()
        };
        match solve_variational_inequality(&p, &grid(121, 10), &cfg) {
            Err(PdeError::Convergence {
                residual,
                iterations: 1,
                ..
            }) => assert!(residual > 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn linear_extrapolation_keeps_linear_payoffs() {
        let p = bm("x + 10");
        let grid = Grid::new(
            vec![-6.0],
            vec![6.0],
            vec![61],
            0.0,
            1.0,
            20,
            BoundaryMode::LinearExtrapolation,
        )
        .unwrap();
        for scheme in [PdeScheme::Psor, PdeScheme::PolicyIteration] {
            let s = solve_variational_inequality(
                &p,
                &grid,
                &SolverConfig {
                    scheme,
                    ..Default::default()
                },
            )
            .unwrap();
            for (v, g) in s.values[0].iter().zip(&s.obstacle) {
                assert!((v - g).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn raising_the_obstacle_never_lowers_v() {
        let lo = bm("max(1 - x^2, 0)");
        let hi = bm("max(1 - x^2, 0) + 0.1*max(x, 0)");
        let g = grid(121, 40);
        let a = solve_variational_inequality(&lo, &g, &SolverConfig::default()).unwrap();
        let b = solve_variational_inequality(&hi, &g, &SolverConfig::default()).unwrap();
        for (x, y) in a.values.iter().flatten().zip(b.values.iter().flatten()) {
            assert!(y >= &(x - 1e-9));
        }
    }
}
