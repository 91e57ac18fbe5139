use std::io::Write;

use crate::exec::{map_indexed, Execution};
use crate::scalar::{format_f64, Scalar};

use super::chain::{ChainApprox, ChainGains};

/// Value function on a chain, with the obstacle and the one-step running gain
/// stored per node so that checks need nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurface<S> {
    pub values: Vec<Vec<S>>,
    pub obstacle: Vec<Vec<S>>,
    /// `f(t_k, x) * dt`, zero on the last layer.
    pub running: Vec<Vec<S>>,
    /// Continuation value strictly above the obstacle.
    pub continuation_flag: Vec<Vec<bool>>,
}

impl<S: Scalar> ValueSurface<S> {
    pub fn root(&self) -> &S {
        &self.values[0][0]
    }

    /// `max |v|` over the surface.
    pub fn scale(&self) -> S {
        self.values
            .iter()
            .flatten()
            .fold(S::zero(), |m, v| m.max_of(v.abs_val()))
    }
}

pub fn snell_envelope<S: Scalar, G: ChainGains<S> + Sync>(
    chain: &ChainApprox<S>,
    gains: &G,
) -> ValueSurface<S> {
    snell_envelope_with(chain, gains, Execution::default())
}

/// Backward induction `V_k = max(g, f dt + E[V_{k+1}])`; nodes of a layer are
/// independent and may be processed in parallel.
pub fn snell_envelope_with<S: Scalar, G: ChainGains<S> + Sync>(
    chain: &ChainApprox<S>,
    gains: &G,
    exec: Execution,
) -> ValueSurface<S> {
    let n = chain.n_steps();
    let mut values = vec![Vec::new(); n + 1];
    let mut obstacle = vec![Vec::new(); n + 1];
    let mut running = vec![Vec::new(); n + 1];
    let mut flags = vec![Vec::new(); n + 1];

    let last = &chain.layers[n];
    obstacle[n] = map_indexed(exec, last.len(), |i| gains.terminal(&last[i].state));
    values[n] = obstacle[n].clone();
    running[n] = vec![S::zero(); last.len()];
    flags[n] = vec![false; last.len()];

    for k in (0..n).rev() {
        let layer = &chain.layers[k];
        let t = chain.time(k);
        let next = &values[k + 1];
        let rows: Vec<(S, S, S, bool)> = map_indexed(exec, layer.len(), |i| {
            let node = &layer[i];
            let g = gains.terminal(&node.state);
            let r = gains.running(&t, &chain.dt, &node.state);
            let cont = node
                .children
                .iter()
                .fold(r.clone(), |acc, (c, p)| acc + p.clone() * next[*c].clone());
            let flag = cont > g;
            let v = if flag { cont } else { g.clone() };
            (v, g, r, flag)
        });
        for (v, g, r, f) in rows {
            values[k].push(v);
            obstacle[k].push(g);
            running[k].push(r);
            flags[k].push(f);
        }
    }
    ValueSurface {
        values,
        obstacle,
        running,
        continuation_flag: flags,
    }
}

/// Per-node stop/continue decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingRule<S> {
    pub stop: Vec<Vec<bool>>,
    pub epsilon: S,
}

impl<S: Scalar> StoppingRule<S> {
    /// First layer along `nodes` (one node index per layer) at which the rule stops.
    pub fn first_stop(&self, nodes: &[usize]) -> usize {
        nodes
            .iter()
            .enumerate()
            .find(|(k, &i)| self.stop[*k][i])
            .map(|(k, _)| k)
            .unwrap_or(nodes.len() - 1)
    }

    /// Fraction of nodes of `layer` at which the rule stops.
    pub fn stop_fraction(&self, layer: usize) -> f64 {
        let l = &self.stop[layer];
        l.iter().filter(|s| **s).count() as f64 / l.len() as f64
    }
}

/// Stop iff `v - g <= epsilon`. `None` picks `10 * machine epsilon * max|v|`
/// for floats and exact equality for rationals.
pub fn smallest_optimal_rule<S: Scalar>(
    surface: &ValueSurface<S>,
    epsilon: Option<S>,
) -> StoppingRule<S> {
    let epsilon = epsilon.unwrap_or_else(|| S::default_tolerance(&surface.scale()));
    let n = surface.values.len() - 1;
    let stop = surface
        .values
        .iter()
        .zip(&surface.obstacle)
        .enumerate()
        .map(|(k, (vs, gs))| {
            vs.iter()
                .zip(gs)
                .map(|(v, g)| k == n || v.clone() - g.clone() <= epsilon)
                .collect()
        })
        .collect();
    StoppingRule { stop, epsilon }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupermartingaleCheck<S> {
    /// `max (f dt + E[V_{k+1}] - V_k)^+`.
    pub max_violation: S,
    /// `max |V_k - f dt - E[V_{k+1}]|` over continuation nodes, 0 if there are none.
    pub equality_gap_on_continuation: S,
}

pub fn verify_supermartingale<S: Scalar>(
    surface: &ValueSurface<S>,
    chain: &ChainApprox<S>,
) -> SupermartingaleCheck<S> {
    let mut out = SupermartingaleCheck {
        max_violation: S::zero(),
        equality_gap_on_continuation: S::zero(),
    };
    for k in 0..chain.n_steps() {
        for (i, node) in chain.layers[k].iter().enumerate() {
            let cont = node
                .children
                .iter()
                .fold(surface.running[k][i].clone(), |acc, (c, p)| {
                    acc + p.clone() * surface.values[k + 1][*c].clone()
                });
            let diff = cont - surface.values[k][i].clone();
            out.max_violation = out.max_violation.clone().max_of(diff.clone());
            if surface.continuation_flag[k][i] {
                out.equality_gap_on_continuation = out
                    .equality_gap_on_continuation
                    .clone()
                    .max_of(diff.abs_val());
            }
        }
    }
    out
}

impl<S: Scalar> ValueSurface<S> {
    /// `layer,time,node,x_1..x_d,value,obstacle,continuation,stop`.
    pub fn write_csv<W: Write>(
        &self,
        chain: &ChainApprox<S>,
        rule: &StoppingRule<S>,
        mut w: W,
    ) -> std::io::Result<()> {
        write!(w, "layer,time,node")?;
        for i in 1..=chain.d {
            write!(w, ",x_{i}")?;
        }
        writeln!(w, ",value,obstacle,continuation,stop")?;
        for (k, layer) in chain.layers.iter().enumerate() {
            let t = format_f64(chain.time(k).to_f64());
            for (i, node) in layer.iter().enumerate() {
                write!(w, "{k},{t},{i}")?;
                for x in &node.state {
                    write!(w, ",{}", format_f64(x.to_f64()))?;
                }
                writeln!(
                    w,
                    ",{},{},{},{}",
                    format_f64(self.values[k][i].to_f64()),
                    format_f64(self.obstacle[k][i].to_f64()),
                    self.continuation_flag[k][i] as u8,
                    rule.stop[k][i] as u8
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{FnGains, Scheme};
    use crate::model::{ModelKind, ScalarFn, StoppingProblem};
    use crate::scalar::{int, ratio, Rational};
    use num_traits::{Signed, Zero};

    fn sym_walk(depth: usize) -> ChainApprox<Rational> {
        ChainApprox::walk(
            int(0),
            int(0),
            ratio(1, 1),
            depth,
            &[(int(-1), ratio(1, 2)), (int(1), ratio(1, 2))],
        )
        .unwrap()
    }

    fn gains<G: Fn(&[Rational]) -> Rational>(
        f: Rational,
        g: G,
    ) -> FnGains<impl Fn(&Rational, &[Rational]) -> Rational, G> {
        FnGains {
            running: move |_: &Rational, _: &[Rational]| f.clone(),
            terminal: g,
        }
    }

    #[test]
    fn abs_walk_root_is_one() {
        let c = sym_walk(2);
        let s = snell_envelope(&c, &gains(int(0), |x: &[Rational]| x[0].abs()));
        assert_eq!(*s.root(), int(1));
        let rule = smallest_optimal_rule(&s, None);
        assert!(!rule.stop[0][0]);
        assert!(rule.stop[1].iter().all(|s| *s));
    }

    #[test]
    fn pure_running_gain_continues_to_the_end() {
        let c = ChainApprox::walk(
            int(0),
            int(0),
            ratio(1, 4),
            4,
            &[(int(-1), ratio(1, 2)), (int(1), ratio(1, 2))],
        )
        .unwrap();
        let s = snell_envelope(&c, &gains(int(1), |_: &[Rational]| Rational::zero()));
        assert_eq!(*s.root(), int(1));
    }

    #[test]
    fn martingale_identity_gain_gives_x0() {
        let c = ChainApprox::walk(
            int(3),
            int(0),
            ratio(1, 3),
            3,
            &[
                (int(-1), ratio(1, 3)),
                (int(0), ratio(1, 3)),
                (int(1), ratio(1, 3)),
            ],
        )
        .unwrap();
        let s = snell_envelope(&c, &gains(int(0), |x: &[Rational]| x[0].clone()));
        assert_eq!(*s.root(), int(3));
        // every node ties, so the smallest rule stops immediately
        assert!(smallest_optimal_rule(&s, None).stop[0][0]);
    }

    #[test]
    fn constant_gain_stops_at_once() {
        let c = sym_walk(3);
        let s = snell_envelope(&c, &gains(int(0), |_: &[Rational]| int(5)));
        let rule = smallest_optimal_rule(&s, None);
        assert!(rule.stop.iter().flatten().all(|s| *s));
    }

    #[test]
    fn square_gain_continues_until_the_end() {
        // dt = 1/4, +-1/2 steps: variance dt per step, so x^2 - t is a martingale
        let c = ChainApprox::walk(
            int(0),
            int(0),
            ratio(1, 4),
            4,
            &[(ratio(-1, 2), ratio(1, 2)), (ratio(1, 2), ratio(1, 2))],
        )
        .unwrap();
        let s = snell_envelope(
            &c,
            &gains(int(0), |x: &[Rational]| x[0].clone() * x[0].clone()),
        );
        assert_eq!(*s.root(), int(1));
        let rule = smallest_optimal_rule(&s, None);
        for k in 0..4 {
            assert!(rule.stop[k].iter().all(|s| !*s), "layer {k}");
            for (i, v) in s.values[k].iter().enumerate() {
                let x = &c.layers[k][i].state[0];
                assert_eq!(*v, x.clone() * x.clone() + ratio(4 - k as i64, 4));
            }
        }
    }

    #[test]
    fn supermartingale_checks() {
        let c = sym_walk(4);
        let s = snell_envelope(
            &c,
            &gains(ratio(1, 10), |x: &[Rational]| (x[0].clone() - int(1)).abs()),
        );
        let chk = verify_supermartingale(&s, &c);
        assert!(chk.max_violation.is_zero());
        assert!(chk.equality_gap_on_continuation.is_zero());
        // obstacle far above the continuation value: all stopped, empty gap set
        let s = snell_envelope(&c, &gains(int(0), |x: &[Rational]| int(100) + x[0].clone()));
        assert!(s.continuation_flag.iter().flatten().all(|f| !*f));
        assert!(verify_supermartingale(&s, &c)
            .equality_gap_on_continuation
            .is_zero());
    }

    #[test]
    fn float_surface_and_policies_agree() {
        let p = StoppingProblem::preset(
            ModelKind::Gbm { mu: 0.06, nu: 0.2 },
            1,
            1.0,
            ScalarFn::Const(0.0),
            ScalarFn::parse("max(100 - x, 0)").unwrap(),
        )
        .unwrap();
        let c = ChainApprox::build(&p, 0.0, &[100.0], 200, Scheme::Trinomial).unwrap();
        let a = snell_envelope_with(&c, &p, Execution::Sequential);
        let b = snell_envelope_with(&c, &p, Execution::Parallel);
        assert_eq!(a, b);
        assert!(a
            .values
            .iter()
            .flatten()
            .zip(a.obstacle.iter().flatten())
            .all(|(v, g)| v >= g));
        assert_eq!(a.values[200], a.obstacle[200]);
        let chk = verify_supermartingale(&a, &c);
        assert!(chk.max_violation <= 1e-12);
        let rule = smallest_optimal_rule(&a, None);
        assert!(rule.epsilon > 0.0 && rule.epsilon < 1e-10);
        let mut buf = Vec::new();
        a.write_csv(&c, &rule, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("layer,time,node,x_1,value,obstacle,continuation,stop\n"));
        assert_eq!(text.lines().count(), 1 + c.n_nodes());
    }
}
