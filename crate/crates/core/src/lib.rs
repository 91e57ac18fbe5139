//! Finite-horizon optimal stopping for diffusions: value functions by
//! lattice backward induction, obstacle-problem finite differences and
//! Monte Carlo, plus exhaustive checks on finite filtered spaces.

pub mod enumeration;
pub mod exec;
pub mod expr;
pub mod lattice;
pub mod model;
pub mod montecarlo;
pub mod pde;
pub mod scalar;
pub mod sde;

pub use exec::Execution;
pub use model::{ModelKind, ScalarFn, StoppingProblem};
pub use scalar::{Rational, Scalar};
