//! Finite filtered probability spaces: every stopping time enumerated,
//! conditional values computed exactly, and the decomposition of
//! `F`-stopping times into `H`-stopping times carried out step by step.

mod approx;
pub mod random;
mod space;
mod stopping;
mod value;

pub use approx::{
    approximate_stopping_time, disjointify_rectangles, ApproximationTrace, Cell, CellSummary, Rect,
    SignRefinement, TraceSummary,
};
pub use space::{
    space_from_chain, FiniteFilteredSpace, GainTable, ProductStructure, StoppingTimeTable,
};
pub use stopping::{
    count_stopping_times, enumerate_stopping_times, for_each_stopping_time, DEFAULT_CAP,
};
pub use value::{
    expected_gain, snell_on_space, theta_atoms, value_brute_force, value_brute_force_capped,
    verify_key_equality, verify_smallest_optimal, ConditionalValues, KeyEquality, SmallestOptimal,
    ThetaAtom,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnumerationError {
    #[error("invalid space: {0}")]
    Invalid(String),
    #[error("not adapted: {0}")]
    NotAdapted(String),
    #[error("the space has no product structure G v H")]
    MissingProduct,
    #[error("G and H are not independent: {0}")]
    Independence(String),
    #[error("{count} stopping times exceed the cap of {cap}")]
    CapExceeded { count: u128, cap: u128 },
    #[error("decomposition check failed: {0}")]
    Construction(String),
}
