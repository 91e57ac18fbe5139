use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::model::StoppingProblem;
use crate::scalar::format_f64;

use super::operator::stencil_at;
use super::solver::PdeSurface;
use super::PdeError;

/// Discrete residuals of the obstacle problem. The interior residual uses
/// the fully implicit form `(v[k+1] - v[k]) / dt + L v[k] + f(t_k)`. It is a
/// consistency check where `v` is smooth, not a proof of the viscosity
/// property.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub terminal_gap: f64,
    pub obstacle_violation: f64,
    pub interior_pde_residual_on_continuation: f64,
    pub complementarity_max: f64,
}

/// Interior residual field `R[k][node]` for `k < N`; zero on edges.
pub fn pde_residual(surface: &PdeSurface, p: &StoppingProblem) -> Result<Vec<Vec<f64>>, PdeError> {
    let grid = &surface.grid;
    let dt = grid.dt();
    (0..grid.n_time)
        .map(|k| {
            let t = grid.time(k);
            let (v, next) = (&surface.values[k], &surface.values[k + 1]);
            (0..grid.n_nodes())
                .map(|n| {
                    if grid.is_boundary(n) {
                        return Ok(0.0);
                    }
                    let lv = stencil_at(p, grid, t, n)?.apply(v, n);
                    Ok((next[n] - v[n]) / dt + lv + p.f(t, &grid.point(n)))
                })
                .collect()
        })
        .collect()
}

/// `max_node min(|R|, |v - g|)` per layer `k < N`, interior nodes only.
/// Shows where the complementarity residual concentrates; for a kinked
/// obstacle it is the last layers next to the kink.
pub fn complementarity_by_layer(
    surface: &PdeSurface,
    p: &StoppingProblem,
) -> Result<Vec<f64>, PdeError> {
    let res = pde_residual(surface, p)?;
    let g = &surface.obstacle;
    Ok(res
        .iter()
        .enumerate()
        .map(|(k, r)| {
            (0..surface.grid.n_nodes())
                .filter(|n| !surface.grid.is_boundary(*n))
                .map(|n| r[n].abs().min((surface.values[k][n] - g[n]).abs()))
                .fold(0.0, f64::max)
        })
        .collect())
}

pub fn viscosity_residual_report(
    surface: &PdeSurface,
    p: &StoppingProblem,
) -> Result<ResidualReport, PdeError> {
    let n_t = surface.grid.n_time;
    let g = &surface.obstacle;
    let terminal_gap = surface.values[n_t]
        .iter()
        .zip(g)
        .map(|(v, g)| (v - g).abs())
        .fold(0.0, f64::max);
    let obstacle_violation = surface
        .values
        .iter()
        .flat_map(|l| l.iter().zip(g).map(|(v, g)| (g - v).max(0.0)))
        .fold(0.0, f64::max);
    let res = pde_residual(surface, p)?;
    let (mut interior, mut comp) = (0.0f64, 0.0f64);
    for k in 0..n_t {
        for n in 0..surface.grid.n_nodes() {
            if surface.grid.is_boundary(n) {
                continue;
            }
            let r = res[k][n].abs();
            if !surface.active[k][n] {
                interior = interior.max(r);
            }
            comp = comp.max(r.min((surface.values[k][n] - g[n]).abs()));
        }
    }
    Ok(ResidualReport {
        terminal_gap,
        obstacle_violation,
        interior_pde_residual_on_continuation: interior,
        complementarity_max: comp,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationRegion {
    pub epsilon: f64,
    /// Nodes with `v - g > epsilon`, per layer.
    pub nodes: Vec<Vec<usize>>,
    /// 1-d only: abscissae where `v - g - epsilon` changes sign, per layer,
    /// from the root of the linear interpolant between bracketing nodes.
    pub boundaries: Vec<Vec<f64>>,
    /// Layers where the first boundary point steps back and forth by at most
    /// one node. Informational.
    pub oscillating_layers: Vec<usize>,
}

impl ContinuationRegion {
    pub fn is_continuation(&self, k: usize, node: usize) -> bool {
        self.nodes[k].binary_search(&node).is_ok()
    }
}

pub fn extract_continuation_region(surface: &PdeSurface, epsilon: f64) -> ContinuationRegion {
    let grid = &surface.grid;
    let g = &surface.obstacle;
    let nodes: Vec<Vec<usize>> = surface
        .values
        .iter()
        .map(|v| {
            (0..grid.n_nodes())
                .filter(|&n| v[n] - g[n] > epsilon)
                .collect()
        })
        .collect();
    let mut boundaries = vec![Vec::new(); surface.values.len()];
    let mut oscillating_layers = Vec::new();
    if grid.dim() == 1 {
        let h = grid.h(0);
        for (k, v) in surface.values.iter().enumerate() {
            let s: Vec<f64> = v.iter().zip(g).map(|(v, g)| v - g - epsilon).collect();
            for j in 0..s.len() - 1 {
                if (s[j] > 0.0) != (s[j + 1] > 0.0) {
                    let x = grid.coord(0, j) + h * s[j] / (s[j] - s[j + 1]);
                    boundaries[k].push(x);
                }
            }
        }
        let first: Vec<Option<f64>> = boundaries.iter().map(|b| b.first().copied()).collect();
        for k in 1..first.len().saturating_sub(1) {
            if let (Some(a), Some(b), Some(c)) = (first[k - 1], first[k], first[k + 1]) {
                let (d1, d2) = (b - a, c - b);
                if d1 * d2 < 0.0 && d1.abs() <= 1.0001 * h && d2.abs() <= 1.0001 * h {
                    oscillating_layers.push(k);
                }
            }
        }
    }
    ContinuationRegion {
        epsilon,
        nodes,
        boundaries,
        oscillating_layers,
    }
}

/// `layer,time,node_index,x_1[,x_2],value,obstacle,active`
pub fn write_surface_csv<W: Write>(surface: &PdeSurface, mut w: W) -> io::Result<()> {
    let grid = &surface.grid;
    let xs: Vec<String> = (1..=grid.dim()).map(|i| format!("x_{i}")).collect();
    writeln!(
        w,
        "layer,time,node_index,{},value,obstacle,active",
        xs.join(",")
    )?;
    for (k, v) in surface.values.iter().enumerate() {
        let t = format_f64(grid.time(k));
        for n in 0..grid.n_nodes() {
            let x: Vec<String> = grid.point(n).into_iter().map(format_f64).collect();
            writeln!(
                w,
                "{k},{t},{n},{},{},{},{}",
                x.join(","),
                format_f64(v[n]),
                format_f64(surface.obstacle[n]),
                u8::from(surface.active[k][n])
            )?;
        }
    }
    Ok(())
}

/// Value and obstacle at one layer, `x_1[,x_2],value,obstacle`.
pub fn write_plot_csv<W: Write>(surface: &PdeSurface, layer: usize, mut w: W) -> io::Result<()> {
    let grid = &surface.grid;
    let xs: Vec<String> = (1..=grid.dim()).map(|i| format!("x_{i}")).collect();
    writeln!(w, "{},value,obstacle", xs.join(","))?;
    for n in 0..grid.n_nodes() {
        let x: Vec<String> = grid.point(n).into_iter().map(format_f64).collect();
        writeln!(
            w,
            "{},{},{}",
            x.join(","),
            format_f64(surface.values[layer][n]),
            format_f64(surface.obstacle[n])
        )?;
    }
    Ok(())
}

/// Free-boundary curve, `layer,time,boundary`, one row per crossing.
pub fn write_boundary_csv<W: Write>(
    surface: &PdeSurface,
    region: &ContinuationRegion,
    mut w: W,
) -> io::Result<()> {
    writeln!(w, "layer,time,boundary")?;
    for (k, b) in region.boundaries.iter().enumerate() {
        for x in b {
            writeln!(
                w,
                "{k},{},{}",
                format_f64(surface.grid.time(k)),
                format_f64(*x)
            )?;
        }
    }
    Ok(())
}
