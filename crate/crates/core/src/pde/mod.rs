//! Finite-difference solver for the obstacle problem
//! `max{v_t + L v + f, g - v} = 0`, `v(T, .) = g`, on a box in one or two
//! dimensions, where `L v = <b, grad v> + 1/2 tr(sigma sigma^T D^2 v)`.

mod grid;
mod operator;
mod report;
mod solver;

use thiserror::Error;

pub use grid::{BoundaryMode, Grid};
pub use operator::{generator_apply, stencil_at, Stencil};
pub use report::{
    complementarity_by_layer, extract_continuation_region, pde_residual, viscosity_residual_report,
    write_boundary_csv, write_plot_csv, write_surface_csv, ContinuationRegion, ResidualReport,
};
pub use solver::{solve_variational_inequality, PdeScheme, PdeSurface, SolverConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PdeError {
    #[error("no stencil at boundary node {node}")]
    Stencil { node: usize },
    #[error("solver did not converge at step {step} after {iterations} iterations (residual {residual:e})")]
    Convergence {
        step: usize,
        residual: f64,
        iterations: usize,
    },
    #[error("unstable scheme: {0}")]
    Stability(String),
    #[error("non-finite coefficient or value at t = {t}, x = {x:?}")]
    NonFinite { t: f64, x: Vec<f64> },
    #[error("{0}")]
    Invalid(String),
}
