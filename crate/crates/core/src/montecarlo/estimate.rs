use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::exec::{chunked_reduce, Execution};
use crate::scalar::format_f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub method: String,
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Fraction of paths whose stopping decision fell outside the rule's box.
    pub offgrid_fraction: f64,
}

pub const CSV_HEADER: &str = "method,mean,std_error,n_paths,seed,offgrid_fraction";

impl ValueEstimate {
    /// Sample mean and standard error of per-path gains.
    pub fn from_samples(
        method: &str,
        gains: &[f64],
        seed: u64,
        offgrid_fraction: f64,
        exec: Execution,
    ) -> Self {
        let n = gains.len();
        // a constant sample is reported exactly, free of summation rounding
        if gains.iter().all(|g| g.to_bits() == gains[0].to_bits()) {
            return ValueEstimate {
                method: method.to_string(),
                mean: gains[0],
                std_error: 0.0,
                n_paths: n,
                seed,
                offgrid_fraction,
            };
        }
        let mean = chunked_reduce(exec, n, || 0.0, |a, i| a + gains[i], |a, b| a + b) / n as f64;
        let ss = chunked_reduce(
            exec,
            n,
            || 0.0,
            |a, i| a + (gains[i] - mean).powi(2),
            |a, b| a + b,
        );
        let std_error = if n > 1 {
            (ss / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        ValueEstimate {
            method: method.to_string(),
            mean,
            std_error,
            n_paths: n,
            seed,
            offgrid_fraction,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("estimate serializes")
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.method,
            format_f64(self.mean),
            format_f64(self.std_error),
            self.n_paths,
            self.seed,
            format_f64(self.offgrid_fraction)
        )
    }

    /// Appends one row, writing the header first when `with_header`.
    pub fn append_csv<W: Write>(&self, mut w: W, with_header: bool) -> io::Result<()> {
        if with_header {
            writeln!(w, "{CSV_HEADER}")?;
        }
        writeln!(w, "{}", self.csv_row())
    }
}
