//! Backward induction on large one-dimensional lattices without storing the
//! chain: memory is linear in the number of steps.

use crate::exec::{map_indexed, Execution};
use crate::model::StoppingProblem;

use super::chain::{Geometry, Scheme};
use super::LatticeError;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseResult {
    pub root: f64,
    /// Per layer `0..N`, the largest state `s` such that every node at or
    /// below `s` stops; `None` when the lowest node continues.
    pub lower_boundary: Vec<Option<f64>>,
}

pub fn root_value(
    p: &StoppingProblem,
    t0: f64,
    x0: f64,
    n_steps: usize,
    scheme: Scheme,
) -> Result<DenseResult, LatticeError> {
    root_value_with(p, t0, x0, n_steps, scheme, Execution::default())
}

pub fn root_value_with(
    p: &StoppingProblem,
    t0: f64,
    x0: f64,
    n_steps: usize,
    scheme: Scheme,
    exec: Execution,
) -> Result<DenseResult, LatticeError> {
    if scheme == Scheme::TensorTrinomial {
        return Err(LatticeError::Unsupported(
            "streaming induction is one-dimensional".into(),
        ));
    }
    let geo = Geometry::new(p, t0, &[x0], n_steps, scheme)?;
    let n = n_steps;
    let mut next: Vec<f64> = (0..geo.axis_len(n))
        .map(|i| p.g(&[geo.coord(0, n, i)]))
        .collect();
    let mut boundary = vec![None; n];
    for k in (0..n).rev() {
        let t = t0 + k as f64 * geo.dt;
        let rows: Vec<Result<(f64, bool, f64), LatticeError>> =
            map_indexed(exec, geo.axis_len(k), |i| {
                let x = [geo.coord(0, k, i)];
                let b = p.drift(t, &x)[0];
                let a = p.diffusion(t, &x)[0];
                let mut pr = [0.0; 3];
                let nb = geo.branch_1d(0, k, i, b, a, &mut pr).map_err(|prob| {
                    LatticeError::Stability {
                        layer: k,
                        node: i,
                        prob,
                    }
                })?;
                let cont = (0..nb).fold(p.f(t, &x) * geo.dt, |acc, c| acc + pr[c] * next[i + c]);
                let g = p.g(&x);
                Ok((cont.max(g), cont > g, x[0]))
            });
        let mut cur = Vec::with_capacity(rows.len());
        let mut states = Vec::with_capacity(rows.len());
        let mut flags = Vec::with_capacity(rows.len());
        for r in rows {
            let (v, c, x) = r?;
            cur.push(v);
            flags.push(c);
            states.push(x);
        }
        // order nodes by state in case the axis decreases
        let ascending = states.len() < 2 || states[0] < states[1];
        let order: Box<dyn Iterator<Item = usize>> = if ascending {
            Box::new(0..states.len())
        } else {
            Box::new((0..states.len()).rev())
        };
        let mut top = None;
        for i in order {
            if flags[i] {
                break;
            }
            top = Some(states[i]);
        }
        boundary[k] = top;
        next = cur;
    }
    Ok(DenseResult {
        root: next[0],
        lower_boundary: boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{snell_envelope, ChainApprox};
    use crate::model::{ModelKind, ScalarFn};

    #[test]
    fn matches_explicit_chain() {
        let p = StoppingProblem::preset(
            ModelKind::Gbm { mu: 0.06, nu: 0.2 },
            1,
            1.0,
            ScalarFn::Const(0.0),
            ScalarFn::parse("max(100 - x, 0)").unwrap(),
        )
        .unwrap();
        for scheme in [Scheme::Binomial, Scheme::Trinomial] {
            let c = ChainApprox::build(&p, 0.0, &[100.0], 120, scheme).unwrap();
            let s = snell_envelope(&c, &p);
            let d = root_value(&p, 0.0, 100.0, 120, scheme).unwrap();
            assert_eq!(*s.root(), d.root);
            // exercise region sits below the strike
            let b = d.lower_boundary[60].unwrap();
            assert!(b < 100.0 && b > 50.0, "{b}");
            let seq = root_value_with(&p, 0.0, 100.0, 120, scheme, Execution::Sequential).unwrap();
            assert_eq!(seq, d);
        }
    }
}
