use serde::{Deserialize, Serialize};

use crate::model::StoppingProblem;

use super::PdeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    /// `v = g` on the edge of the box.
    #[default]
    DirichletG,
    /// Edge value extrapolated linearly from the two inward neighbours,
    /// then floored at `g`.
    LinearExtrapolation,
}

impl std::str::FromStr for BoundaryMode {
    type Err = PdeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dirichlet-g" => Ok(BoundaryMode::DirichletG),
            "linear-extrapolation" => Ok(BoundaryMode::LinearExtrapolation),
            _ => Err(PdeError::Invalid(format!(
                "unknown boundary mode '{s}' (dirichlet-g | linear-extrapolation)"
            ))),
        }
    }
}

/// Tensor grid on `[t0, T] x box`; nodes are stored row-major, last
/// dimension fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Points per dimension, edges included.
    pub n_space: Vec<usize>,
    pub n_time: usize,
    pub t0: f64,
    pub horizon: f64,
    pub boundary: BoundaryMode,
}

impl Grid {
    pub fn new(
        lo: Vec<f64>,
        hi: Vec<f64>,
        n_space: Vec<usize>,
        t0: f64,
        horizon: f64,
        n_time: usize,
        boundary: BoundaryMode,
    ) -> Result<Self, PdeError> {
        let d = lo.len();
        if d == 0 || d > 2 || hi.len() != d || n_space.len() != d {
            return Err(PdeError::Invalid(format!(
                "grid needs 1 or 2 dimensions with matching lo/hi/n_space, got {d}"
            )));
        }
        for i in 0..d {
            if !(lo[i] < hi[i]) || !lo[i].is_finite() || !hi[i].is_finite() {
                return Err(PdeError::Invalid(format!(
                    "need lo < hi in dimension {}",
                    i + 1
                )));
            }
            if n_space[i] < 3 {
                return Err(PdeError::Invalid(
                    "need at least 3 points per dimension".into(),
                ));
            }
        }
        if n_time == 0 {
            return Err(PdeError::Invalid("need at least one time step".into()));
        }
        if !(t0 < horizon) {
            return Err(PdeError::Invalid(format!(
                "need t0 < T, got {t0} and {horizon}"
            )));
        }
        Ok(Grid {
            lo,
            hi,
            n_space,
            n_time,
            t0,
            horizon,
            boundary,
        })
    }

    /// Box of `x0 +- width` standard deviations of the driftless process
    /// linearized at `x0`, i.e. `width * sqrt(a_ii(t0, x0) (T - t0))`.
    pub fn centered(
        p: &StoppingProblem,
        t0: f64,
        x0: &[f64],
        width: f64,
        n_space: Vec<usize>,
        n_time: usize,
        boundary: BoundaryMode,
    ) -> Result<Self, PdeError> {
        let d = p.dim();
        if x0.len() != d {
            return Err(PdeError::Invalid(format!(
                "x0 has length {}, d = {d}",
                x0.len()
            )));
        }
        let a = p.diffusion(t0, x0);
        let tau = p.horizon() - t0;
        let (mut lo, mut hi) = (Vec::with_capacity(d), Vec::with_capacity(d));
        for i in 0..d {
            let s = (a[i * d + i].max(0.0) * tau).sqrt();
            let r = width * if s > 0.0 { s } else { 1.0 };
            lo.push(x0[i] - r);
            hi.push(x0[i] + r);
        }
        Grid::new(lo, hi, n_space, t0, p.horizon(), n_time, boundary)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_space.iter().product()
    }

    pub fn h(&self, i: usize) -> f64 {
        (self.hi[i] - self.lo[i]) / (self.n_space[i] - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.n_time as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_time {
            self.horizon
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn coord(&self, i: usize, j: usize) -> f64 {
        if j + 1 == self.n_space[i] {
            self.hi[i]
        } else {
            self.lo[i] + j as f64 * self.h(i)
        }
    }

    /// Multi-index of a flat node index.
    pub fn index(&self, node: usize) -> [usize; 2] {
        if self.dim() == 1 {
            [node, 0]
        } else {
            [node / self.n_space[1], node % self.n_space[1]]
        }
    }

    pub fn flat(&self, idx: [usize; 2]) -> usize {
        if self.dim() == 1 {
            idx[0]
        } else {
            idx[0] * self.n_space[1] + idx[1]
        }
    }

    pub fn point(&self, node: usize) -> Vec<f64> {
        let idx = self.index(node);
        (0..self.dim()).map(|i| self.coord(i, idx[i])).collect()
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        let idx = self.index(node);
        (0..self.dim()).any(|i| idx[i] == 0 || idx[i] + 1 == self.n_space[i])
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dim()).all(|i| x[i] >= self.lo[i] && x[i] <= self.hi[i])
    }

    /// Multilinear interpolation of a nodal field; `None` outside the box.
    pub fn interpolate(&self, field: &[f64], x: &[f64]) -> Option<f64> {
        if !self.contains(x) {
            return None;
        }
        let d = self.dim();
        let mut base = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for i in 0..d {
            let s = (x[i] - self.lo[i]) / self.h(i);
            let j = (s.floor() as usize).min(self.n_space[i] - 2);
            base[i] = j;
            frac[i] = (s - j as f64).clamp(0.0, 1.0);
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = [0usize; 2];
            for i in 0..d {
                let up = (corner >> i) & 1;
                idx[i] = base[i] + up;
                w *= if up == 1 { frac[i] } else { 1.0 - frac[i] };
            }
            if w != 0.0 {
                acc += w * field[self.flat(idx)];
            }
        }
        Some(acc)
    }
}
