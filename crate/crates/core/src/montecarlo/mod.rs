//! Regression Monte Carlo value estimates and forward evaluation of stopping
//! rules on simulated paths.

mod estimate;
mod lsmc;
mod rule;

use thiserror::Error;

pub use estimate::{ValueEstimate, CSV_HEADER};
pub use lsmc::{
    fit_lsmc, longstaff_schwartz, longstaff_schwartz_out_of_sample, longstaff_schwartz_with,
    LsmcOptions, LsmcRule, StepFit,
};
pub use rule::{evaluate_rule, evaluate_rule_with, RuleSource, MAX_OFFGRID_FRACTION};

use crate::model::ModelError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum McError {
    #[error("regression at step {step} is ill-conditioned (rcond {rcond:e}); try a degree below {degree}")]
    Conditioning {
        step: usize,
        degree: usize,
        rcond: f64,
    },
    #[error("{:.1}% of paths left the rule's box; enlarge the grid box", 100.0 * fraction)]
    Coverage { fraction: f64 },
    #[error("non-finite gain on path {path}")]
    NonFinite { path: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}
