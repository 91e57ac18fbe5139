use crate::exec::{map_indexed, Execution};
use crate::lattice::{ChainApprox, ValueSurface};
use crate::model::{realized_gain, StoppingProblem};
use crate::pde::PdeSurface;
use crate::sde::PathBundle;

use super::estimate::ValueEstimate;
use super::McError;

/// Paths allowed to take their decision outside the rule's box.
pub const MAX_OFFGRID_FRACTION: f64 = 0.05;

/// Where the stop/continue decision comes from.
#[derive(Debug, Clone, Copy)]
pub enum RuleSource<'a> {
    Pde(&'a PdeSurface),
    Lattice {
        chain: &'a ChainApprox<f64>,
        surface: &'a ValueSurface<f64>,
    },
    Immediate,
    Terminal,
}

impl RuleSource<'_> {
    fn tag(&self) -> &'static str {
        match self {
            RuleSource::Pde(_) => "rule-pde",
            RuleSource::Lattice { .. } => "rule-lattice",
            RuleSource::Immediate => "rule-immediate",
            RuleSource::Terminal => "rule-terminal",
        }
    }
}

/// Sorted axis with the node index of each coordinate.
#[derive(Debug, Clone)]
struct Axis {
    coords: Vec<f64>,
    index: Vec<usize>,
}

impl Axis {
    fn new(pairs: impl Iterator<Item = (f64, usize)>) -> Self {
        let mut v: Vec<(f64, usize)> = pairs.collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        Axis {
            coords: v.iter().map(|p| p.0).collect(),
            index: v.iter().map(|p| p.1).collect(),
        }
    }

    /// Bracketing positions and weight of the upper one; clamps outside.
    fn locate(&self, x: f64) -> (usize, usize, f64) {
        let n = self.coords.len();
        if n == 1 || x <= self.coords[0] {
            return (0, 0, 0.0);
        }
        if x >= self.coords[n - 1] {
            return (n - 1, n - 1, 0.0);
        }
        let j = self.coords.partition_point(|c| *c <= x) - 1;
        let w = (x - self.coords[j]) / (self.coords[j + 1] - self.coords[j]);
        (j, j + 1, w)
    }
}

/// `v - g` per lattice layer on tensor axes.
struct LatticeLayer {
    axes: Vec<Axis>,
    /// Node count along the last axis, for row-major flattening.
    stride: usize,
    gap: Vec<f64>,
}

impl LatticeLayer {
    fn gap_at(&self, x: &[f64]) -> f64 {
        let loc: Vec<(usize, usize, f64)> = self
            .axes
            .iter()
            .zip(x)
            .map(|(a, xi)| a.locate(*xi))
            .collect();
        let node = |pos: &[usize]| -> usize {
            if self.axes.len() == 1 {
                self.axes[0].index[pos[0]]
            } else {
                self.axes[0].index[pos[0]] * self.stride + self.axes[1].index[pos[1]]
            }
        };
        let d = self.axes.len();
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut pos = [0usize; 2];
            for i in 0..d {
                let (lo, hi, wi) = loc[i];
                if (corner >> i) & 1 == 1 {
                    pos[i] = hi;
                    w *= wi;
                } else {
                    pos[i] = lo;
                    w *= 1.0 - wi;
                }
            }
            if w != 0.0 {
                acc += w * self.gap[node(&pos[..d])];
            }
        }
        acc
    }
}

fn lattice_layers(
    chain: &ChainApprox<f64>,
    surface: &ValueSurface<f64>,
) -> Result<Vec<LatticeLayer>, McError> {
    if chain.d > 2 {
        return Err(McError::Invalid(
            "lattice rules are evaluated in one or two dimensions".into(),
        ));
    }
    (0..chain.layers.len())
        .map(|k| {
            let layer = &chain.layers[k];
            let gap: Vec<f64> = surface.values[k]
                .iter()
                .zip(&surface.obstacle[k])
                .map(|(v, g)| v - g)
                .collect();
            if chain.d == 1 {
                Ok(LatticeLayer {
                    axes: vec![Axis::new(
                        layer.iter().enumerate().map(|(i, n)| (n.state[0], i)),
                    )],
                    stride: 1,
                    gap,
                })
            } else {
                let shape = &chain.shapes[k];
                if shape.len() != 2 || shape[0] * shape[1] != layer.len() {
                    return Err(McError::Invalid(
                        "two-dimensional lattice rules need a tensor chain".into(),
                    ));
                }
                let (n1, n2) = (shape[0], shape[1]);
                Ok(LatticeLayer {
                    axes: vec![
                        Axis::new((0..n1).map(|i| (layer[i * n2].state[0], i))),
                        Axis::new((0..n2).map(|j| (layer[j].state[1], j))),
                    ],
                    stride: n2,
                    gap,
                })
            }
        })
        .collect()
}

/// Latest layer with `time <= t`.
fn previous_layer(times: impl Fn(usize) -> f64, n_layers: usize, t: f64) -> usize {
    let slack = 1e-12 * t.abs().max(1.0);
    (0..n_layers)
        .rev()
        .find(|&k| times(k) <= t + slack)
        .unwrap_or(0)
}

/// Forward evaluation of a threshold rule: each path stops at the first date
/// where the interpolated `v - g` is at most `epsilon`, using the latest
/// surface layer not after that date. Outside the surface's box `v = g`, so
/// the path stops and counts as off-grid.
pub fn evaluate_rule(
    p: &StoppingProblem,
    bundle: &PathBundle,
    source: RuleSource<'_>,
    epsilon: f64,
) -> Result<ValueEstimate, McError> {
    evaluate_rule_with(p, bundle, source, epsilon, Execution::default())
}

pub fn evaluate_rule_with(
    p: &StoppingProblem,
    bundle: &PathBundle,
    source: RuleSource<'_>,
    epsilon: f64,
    exec: Execution,
) -> Result<ValueEstimate, McError> {
    if bundle.d != p.dim() {
        return Err(McError::Invalid(format!(
            "bundle has d = {}, problem has d = {}",
            bundle.d,
            p.dim()
        )));
    }
    let n_steps = bundle.n_steps();
    let lattice = match source {
        RuleSource::Lattice { chain, surface } => Some(lattice_layers(chain, surface)?),
        _ => None,
    };
    // the lattice box is the hull of all its nodes
    let hull = match source {
        RuleSource::Lattice { chain, .. } => {
            let mut lo = vec![f64::INFINITY; chain.d];
            let mut hi = vec![f64::NEG_INFINITY; chain.d];
            for n in chain.layers.iter().flatten() {
                for i in 0..chain.d {
                    lo[i] = lo[i].min(n.state[i]);
                    hi[i] = hi[i].max(n.state[i]);
                }
            }
            Some((lo, hi))
        }
        _ => None,
    };
    let layer_of: Vec<usize> = bundle
        .times
        .iter()
        .map(|&t| match source {
            RuleSource::Pde(s) => previous_layer(|k| s.grid.time(k), s.grid.n_time + 1, t),
            RuleSource::Lattice { chain, .. } => {
                previous_layer(|k| chain.time(k), chain.layers.len(), t)
            }
            _ => 0,
        })
        .collect();
    let pde_gap: Option<Vec<Vec<f64>>> = match source {
        RuleSource::Pde(s) => Some(
            s.values
                .iter()
                .map(|l| l.iter().zip(&s.obstacle).map(|(v, g)| v - g).collect())
                .collect(),
        ),
        _ => None,
    };
    // (stop index, decided off-grid)
    let decide = |i: usize| -> (usize, bool) {
        match source {
            RuleSource::Immediate => (0, false),
            RuleSource::Terminal => (n_steps, false),
            RuleSource::Pde(s) => {
                let gaps = pde_gap.as_ref().expect("pde gaps");
                for k in 0..n_steps {
                    let x = bundle.state(i, k);
                    match s.grid.interpolate(&gaps[layer_of[k]], x) {
                        Some(gap) if gap > epsilon => continue,
                        Some(_) => return (k, false),
                        None => return (k, true),
                    }
                }
                (n_steps, false)
            }
            RuleSource::Lattice { .. } => {
                let layers = lattice.as_ref().expect("lattice layers");
                let (lo, hi) = hull.as_ref().expect("lattice hull");
                for k in 0..n_steps {
                    let x = bundle.state(i, k);
                    if x.iter()
                        .zip(lo.iter().zip(hi))
                        .any(|(xi, (l, h))| xi < l || xi > h)
                    {
                        return (k, true);
                    }
                    if layers[layer_of[k]].gap_at(x) <= epsilon {
                        return (k, false);
                    }
                }
                (n_steps, false)
            }
        }
    };
    let rows = map_indexed(exec, bundle.n_paths, |i| {
        let (k, off) = decide(i);
        realized_gain(p, &bundle.times, bundle.path(i), k).map(|r| (r.total, off))
    });
    let mut gains = Vec::with_capacity(rows.len());
    let mut off = 0usize;
    for r in rows {
        let (g, o) = r?;
        gains.push(g);
        off += usize::from(o);
    }
    let fraction = off as f64 / bundle.n_paths as f64;
    if fraction > MAX_OFFGRID_FRACTION {
        return Err(McError::Coverage { fraction });
    }
    Ok(ValueEstimate::from_samples(
        source.tag(),
        &gains,
        bundle.seed,
        fraction,
        exec,
    ))
}
