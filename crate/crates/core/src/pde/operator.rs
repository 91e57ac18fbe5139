use crate::exec::{map_indexed, Execution};
use crate::model::StoppingProblem;

use super::grid::Grid;
use super::PdeError;

/// Discrete generator at one node: `(L v)(node) = center v(node) + sum c v(nbr)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Stencil {
    pub center: f64,
    pub nbrs: Vec<(usize, f64)>,
}

impl Stencil {
    pub fn apply(&self, v: &[f64], node: usize) -> f64 {
        self.nbrs
            .iter()
            .fold(self.center * v[node], |acc, (j, c)| acc + c * v[*j])
    }
}

/// Central differences for `b . grad + 1/2 tr(a D^2)`, four-point stencil for
/// the cross derivative.
pub fn stencil_at(
    p: &StoppingProblem,
    grid: &Grid,
    t: f64,
    node: usize,
) -> Result<Stencil, PdeError> {
    if grid.is_boundary(node) {
        return Err(PdeError::Stencil { node });
    }
    let d = grid.dim();
    let x = grid.point(node);
    let b = p.drift(t, &x);
    let a = p.diffusion(t, &x);
    if b.iter().chain(&a).any(|v| !v.is_finite()) {
        return Err(PdeError::NonFinite { t, x });
    }
    let idx = grid.index(node);
    let shift = |i: usize, s: isize, idx: [usize; 2]| -> [usize; 2] {
        let mut out = idx;
        out[i] = (idx[i] as isize + s) as usize;
        out
    };
    let mut st = Stencil::default();
    for i in 0..d {
        let h = grid.h(i);
        let diff = 0.5 * a[i * d + i] / (h * h);
        let conv = b[i] / (2.0 * h);
        st.center -= 2.0 * diff;
        st.nbrs.push((grid.flat(shift(i, -1, idx)), diff - conv));
        st.nbrs.push((grid.flat(shift(i, 1, idx)), diff + conv));
    }
    if d == 2 {
        // 1/2 (a_12 + a_21) d_12 = a_12 d_12
        let c = a[1] / (4.0 * grid.h(0) * grid.h(1));
        if c != 0.0 {
            for (s0, s1, sign) in [(1, 1, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)] {
                let j = grid.flat(shift(1, s1, shift(0, s0, idx)));
                st.nbrs.push((j, sign * c));
            }
        }
    }
    Ok(st)
}

/// `(L_t phi)(node)` for a nodal field `phi` at layer `k`.
pub fn generator_apply(
    p: &StoppingProblem,
    grid: &Grid,
    k: usize,
    phi: &[f64],
    node: usize,
) -> Result<f64, PdeError> {
    Ok(stencil_at(p, grid, grid.time(k), node)?.apply(phi, node))
}

/// Stencils of every interior node at time `t`; boundary entries are `None`.
pub(crate) fn assemble(
    p: &StoppingProblem,
    grid: &Grid,
    t: f64,
    exec: Execution,
) -> Result<Vec<Option<Stencil>>, PdeError> {
    map_indexed(exec, grid.n_nodes(), |n| {
        if grid.is_boundary(n) {
            Ok(None)
        } else {
            stencil_at(p, grid, t, n).map(Some)
        }
    })
    .into_iter()
    .collect()
}
