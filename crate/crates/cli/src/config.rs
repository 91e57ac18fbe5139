//! Run configuration: an INI file plus `--set section.key=value` overrides.
//!
//! ```ini
//! [problem]
//! ; bachelier | gbm | ou | custom
//! model = gbm
//! d = 1
//! T = 1
//! x0 = 100
//! mu = -0.06
//! sigma = 0.2
//! g = "max(100 - x, 0)"
//! ```
//!
//! Comments take whole lines. Custom dynamics use `drift_i` and `vol_i_j`
//! keys (1-based); missing volatility entries are zero.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use optstop_core::lattice::Scheme;
use optstop_core::model::ModelError;
use optstop_core::pde::{BoundaryMode, PdeScheme};
use optstop_core::{ModelKind, ScalarFn, StoppingProblem};

use crate::error::CliError;

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "problem",
        &[
            "model", "d", "m", "T", "t0", "x0", "mu", "sigma", "kappa", "level", "f", "g",
        ],
    ),
    (
        "solver",
        &[
            "lo",
            "hi",
            "width",
            "n_space",
            "n_time",
            "scheme",
            "theta",
            "tol",
            "max_iter",
            "omega",
            "boundary",
            "rannacher_steps",
            "epsilon",
        ],
    ),
    ("lattice", &["n_steps", "scheme"]),
    (
        "mc",
        &[
            "n_paths",
            "n_steps",
            "seed",
            "degree",
            "out_of_sample",
            "in_the_money_only",
        ],
    ),
    (
        "verify",
        &[
            "spaces",
            "seed",
            "gain_tables",
            "binary_depth",
            "dpp_depth",
            "tau_per_chain",
            "approx_spaces",
        ],
    ),
    ("output", &["dir", "format"]),
];

fn is_known(section: &str, key: &str) -> bool {
    SECTIONS.iter().any(|(s, keys)| {
        *s == section
            && (keys.contains(&key)
                || (section == "problem" && (key.starts_with("drift_") || key.starts_with("vol_"))))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Raw key-value pairs per section, after overrides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, BTreeMap<String, String>>,
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    if s.len() >= 2
        && ((s.starts_with('"') && s.ends_with('"')) || (s.starts_with('\'') && s.ends_with('\'')))
    {
        &s[1..s.len() - 1]
    } else {
        s
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let opts = ini::ParseOption {
            enabled_quote: false,
            enabled_escape: false,
            ..Default::default()
        };
        let ini = ini::Ini::load_from_str_opt(text, opts)
            .map_err(|e| CliError::Config(format!("config syntax: {e}")))?;
        let mut cfg = RunConfig::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if props.iter().next().is_some() {
                    return Err(CliError::Config("keys before the first [section]".into()));
                }
                continue;
            };
            for (k, v) in props.iter() {
                cfg.set(section, k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), CliError> {
        let (section, key) = (section.trim(), key.trim());
        if !is_known(section, key) {
            return Err(CliError::Config(format!("unknown key {section}.{key}")));
        }
        self.values
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), unquote(value).to_string());
        Ok(())
    }

    /// Applies one `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), CliError> {
        let (lhs, value) = spec.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--set expects section.key=value, got '{spec}'"))
        })?;
        let (section, key) = lhs.split_once('.').ok_or_else(|| {
            CliError::Usage(format!("--set expects section.key=value, got '{spec}'"))
        })?;
        self.set(section, key, value)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.values
            .get(section)
            .and_then(|s| s.get(key))
            .map(String::as_str)
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.values.contains_key(section)
    }

    fn parsed<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(section, key)
            .map(|v| {
                v.trim()
                    .parse::<T>()
                    .map_err(|e| CliError::Config(format!("{section}.{key} = '{v}': {e}")))
            })
            .transpose()
    }

    fn or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parsed(section, key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, section: &str, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.parsed(section, key)?
            .ok_or_else(|| CliError::Config(format!("missing {section}.{key}")))
    }

    fn list(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        self.get(section, key)
            .map(|v| {
                v.split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<f64>()
                            .map_err(|e| CliError::Config(format!("{section}.{key} = '{v}': {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn problem(&self) -> Result<ProblemSpec, CliError> {
        if !self.has_section("problem") {
            return Err(CliError::Config(
                "this subcommand needs a [problem] section (use --config)".into(),
            ));
        }
        let s = "problem";
        let d: usize = self.or(s, "d", 1)?;
        let horizon: f64 = self.required(s, "T")?;
        let t0: f64 = self.or(s, "t0", 0.0)?;
        let x0 = self
            .list(s, "x0")?
            .ok_or_else(|| CliError::Config("missing problem.x0".into()))?;
        if x0.len() != d {
            return Err(CliError::Config(format!(
                "problem.x0 has {} entries, d = {d}",
                x0.len()
            )));
        }
        let expr = |key: &str, default: Option<&str>| -> Result<ScalarFn, CliError> {
            let src = self
                .get(s, key)
                .or(default)
                .ok_or_else(|| CliError::Config(format!("missing {s}.{key}")))?;
            ScalarFn::parse(src).map_err(|e| CliError::Config(format!("{s}.{key}: {e}")))
        };
        let f = expr("f", Some("0"))?;
        let g = expr("g", None)?;
        let model: String = self.or(s, "model", "bachelier".to_string())?;
        let model_err = |e: ModelError| CliError::Config(format!("problem: {e}"));
        let problem = match model.as_str() {
            "bachelier" => StoppingProblem::preset(
                ModelKind::Bachelier {
                    mu: self.or(s, "mu", 0.0)?,
                    s: self.or(s, "sigma", 1.0)?,
                },
                d,
                horizon,
                f,
                g,
            ),
            "gbm" => StoppingProblem::preset(
                ModelKind::Gbm {
                    mu: self.or(s, "mu", 0.0)?,
                    nu: self.required(s, "sigma")?,
                },
                d,
                horizon,
                f,
                g,
            ),
            "ou" => StoppingProblem::preset(
                ModelKind::Ou {
                    kappa: self.required(s, "kappa")?,
                    level: self.or(s, "level", 0.0)?,
                    s: self.required(s, "sigma")?,
                },
                d,
                horizon,
                f,
                g,
            ),
            "custom" => {
                let m: usize = self.or(s, "m", d)?;
                let drift = (1..=d)
                    .map(|i| expr(&format!("drift_{i}"), Some("0")))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut vol = Vec::with_capacity(d * m);
                for i in 1..=d {
                    for j in 1..=m {
                        vol.push(expr(&format!("vol_{i}_{j}"), Some("0"))?);
                    }
                }
                for key in self.values[s].keys() {
                    let ok = match key.split('_').collect::<Vec<_>>()[..] {
                        ["drift", i] => i.parse::<usize>().is_ok_and(|i| (1..=d).contains(&i)),
                        ["vol", i, j] => {
                            i.parse::<usize>().is_ok_and(|i| (1..=d).contains(&i))
                                && j.parse::<usize>().is_ok_and(|j| (1..=m).contains(&j))
                        }
                        _ => true,
                    };
                    if !ok {
                        return Err(CliError::Config(format!(
                            "problem.{key} is out of range for d = {d}, m = {m}"
                        )));
                    }
                }
                StoppingProblem::new(d, m, horizon, drift, vol, f, g)
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown problem.model '{other}' (bachelier | gbm | ou | custom)"
                )))
            }
        }
        .map_err(model_err)?;
        if !(t0 >= 0.0 && t0 < horizon) {
            return Err(CliError::Config(format!(
                "problem.t0 = {t0} must lie in [0, T)"
            )));
        }
        Ok(ProblemSpec { problem, t0, x0 })
    }

    pub fn solver(&self, d: usize) -> Result<SolverSpec, CliError> {
        let s = "solver";
        let n_space = match self.get(s, "n_space") {
            None => vec![201; d],
            Some(v) => {
                let parts = v
                    .split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<usize>()
                            .map_err(|e| CliError::Config(format!("solver.n_space = '{v}': {e}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if parts.len() == 1 {
                    vec![parts[0]; d]
                } else {
                    parts
                }
            }
        };
        let boundary: BoundaryMode = self
            .or(s, "boundary", "dirichlet-g".to_string())?
            .parse()
            .map_err(|e| CliError::Config(format!("solver.boundary: {e}")))?;
        let scheme: PdeScheme = self
            .or(s, "scheme", "psor".to_string())?
            .parse()
            .map_err(|e| CliError::Config(format!("solver.scheme: {e}")))?;
        Ok(SolverSpec {
            lo: self.list(s, "lo")?,
            hi: self.list(s, "hi")?,
            width: self.or(s, "width", 6.0)?,
            n_space,
            n_time: self.or(s, "n_time", 200)?,
            boundary,
            scheme,
            theta: self.or(s, "theta", 0.5)?,
            tol: self.or(s, "tol", 1e-10)?,
            max_iter: self.or(s, "max_iter", 20_000)?,
            omega: self.or(s, "omega", 1.5)?,
            rannacher_steps: self.or(s, "rannacher_steps", 2)?,
            epsilon: self.or(s, "epsilon", 1e-8)?,
        })
    }

    pub fn lattice(&self, d: usize) -> Result<LatticeSpec, CliError> {
        let s = "lattice";
        let default = if d == 1 {
            "binomial"
        } else {
            "tensor-trinomial"
        };
        let scheme = match self.or(s, "scheme", default.to_string())?.as_str() {
            "binomial" => Scheme::Binomial,
            "trinomial" => Scheme::Trinomial,
            "tensor-trinomial" => Scheme::TensorTrinomial,
            other => {
                return Err(CliError::Config(format!(
                    "unknown lattice.scheme '{other}' (binomial | trinomial | tensor-trinomial)"
                )))
            }
        };
        Ok(LatticeSpec {
            n_steps: self.or(s, "n_steps", 200)?,
            scheme,
        })
    }

    pub fn mc(&self) -> Result<McSpec, CliError> {
        let s = "mc";
        Ok(McSpec {
            n_paths: self.or(s, "n_paths", 10_000)?,
            n_steps: self.or(s, "n_steps", 100)?,
            seed: self.or(s, "seed", 1)?,
            degree: self.or(s, "degree", 4)?,
            out_of_sample: self.or(s, "out_of_sample", false)?,
            in_the_money_only: self.or(s, "in_the_money_only", true)?,
        })
    }

    pub fn verify(&self) -> Result<VerifySpec, CliError> {
        let s = "verify";
        Ok(VerifySpec {
            spaces: self.or(s, "spaces", 100)?,
            seed: self.or(s, "seed", 7)?,
            gain_tables: self.or(s, "gain_tables", 50)?,
            binary_depth: self.or(s, "binary_depth", 3)?,
            dpp_depth: self.or(s, "dpp_depth", 4)?,
            tau_per_chain: self.or(s, "tau_per_chain", 20)?,
            approx_spaces: self.or(s, "approx_spaces", 50)?,
        })
    }

    pub fn output(&self) -> Result<OutputSpec, CliError> {
        let format = match self.or("output", "format", "csv".to_string())?.as_str() {
            "csv" => Format::Csv,
            "json" => Format::Json,
            other => {
                return Err(CliError::Config(format!(
                    "unknown output.format '{other}' (csv | json)"
                )))
            }
        };
        Ok(OutputSpec {
            dir: PathBuf::from(self.or("output", "dir", "out".to_string())?),
            format,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub problem: StoppingProblem,
    pub t0: f64,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSpec {
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
    /// Half-width of the default box in standard deviations.
    pub width: f64,
    pub n_space: Vec<usize>,
    pub n_time: usize,
    pub boundary: BoundaryMode,
    pub scheme: PdeScheme,
    pub theta: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub omega: f64,
    pub rannacher_steps: usize,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeSpec {
    pub n_steps: usize,
    pub scheme: Scheme,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSpec {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub degree: usize,
    pub out_of_sample: bool,
    pub in_the_money_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifySpec {
    pub spaces: usize,
    pub seed: u64,
    pub gain_tables: usize,
    pub binary_depth: usize,
    pub dpp_depth: usize,
    pub tau_per_chain: usize,
    pub approx_spaces: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub format: Format,
}

#[cfg(test)]
mod tests {
    use super::*;

    const PUT: &str = r#"
[problem]
model = gbm
T = 1
x0 = 100
mu = -0.06
sigma = 0.2
g = "max(100 - x, 0)"

[solver]
n_space = 401
"#;

    #[test]
    fn parses_and_overrides() {
        let mut c = RunConfig::parse(PUT).unwrap();
        assert_eq!(c.get("problem", "g"), Some("max(100 - x, 0)"));
        let p = c.problem().unwrap();
        assert_eq!(p.problem.g(&[80.0]), 20.0);
        assert_eq!(p.problem.drift(0.0, &[100.0]), vec![-6.0]);
        c.apply_override("solver.n_time=50").unwrap();
        let s = c.solver(1).unwrap();
        assert_eq!((s.n_space.clone(), s.n_time), (vec![401], 50));
        assert!(c.apply_override("solver.bogus=1").is_err());
        assert!(c.apply_override("no-dot=1").is_err());
    }

    #[test]
    fn custom_model() {
        let c = RunConfig::parse(
            "[problem]\nmodel = custom\nd = 2\nm = 1\nT = 1\nx0 = 0, 1\ndrift_1 = \"x_2\"\nvol_2_1 = \"0.5\"\ng = \"x_1 + x_2\"\n",
        )
        .unwrap();
        let p = c.problem().unwrap();
        assert_eq!(p.problem.drift(0.0, &[0.0, 3.0]), vec![3.0, 0.0]);
        assert_eq!(p.problem.vol(0.0, &[0.0, 0.0]), vec![0.0, 0.5]);
        let bad = RunConfig::parse(
            "[problem]\nmodel = custom\nT = 1\nx0 = 0\nvol_3_1 = \"1\"\ng = \"x\"\n",
        )
        .unwrap();
        assert!(bad.problem().is_err());
    }

    #[test]
    fn errors_are_config_errors() {
        assert!(RunConfig::parse("[nope]\na = 1\n").is_err());
        let c = RunConfig::parse("[problem]\nT = 1\nx0 = 0\ng = \"x +\"\n").unwrap();
        assert!(matches!(c.problem(), Err(CliError::Config(_))));
        let c = RunConfig::parse("[solver]\nscheme = magic\n").unwrap();
        assert!(c.solver(1).is_err());
        assert!(RunConfig::default().problem().is_err());
    }
}
