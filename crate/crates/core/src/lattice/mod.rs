//! Markov-chain approximations of the diffusion and exact backward induction
//! on them: Snell envelope, smallest optimal rule, DPP residuals.

mod chain;
pub mod dense;
mod dpp;
mod snell;

pub use chain::{ChainApprox, ChainGains, ChainNode, FnGains, MomentErrors, Scheme};
pub use dpp::{verify_dpp, PathTree, Prefix, MAX_PATHS};
pub use snell::{
    smallest_optimal_rule, snell_envelope, snell_envelope_with, verify_supermartingale,
    StoppingRule, SupermartingaleCheck, ValueSurface,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LatticeError {
    #[error(
        "transition probability {prob:.3e} outside [0, 1] at layer {layer}, node {node}; \
         the time step is too coarse, or the drift outgrows the node spacing \
         at the lattice edge (mean reversion does this at any step count)"
    )]
    Stability {
        layer: usize,
        node: usize,
        prob: f64,
    },
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("stopping time is not adapted: {0}")]
    NotAdapted(String),
    #[error("coefficient is non-finite at layer {layer}, node {node}")]
    NonFinite { layer: usize, node: usize },
}
