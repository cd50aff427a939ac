//! Run configuration read from a TOML file.
//!
//! ```toml
//! mode = "convergence"        # solve | convergence | project | diagnose
//! eps = 2e-5
//! lambda = 1.0
//! T = 1e-2
//! dt_rule = { c = 5.656854249492381e-5, beta = 1.0 }   # or: dt = 2e-5
//! manufactured = true
//! out_dir = "out"
//! seed = 7
//!
//! [mesh]
//! sweep = [4, 8, 16]          # or: n = 8, or: file = "square.mesh"
//!
//! [newton]
//! abs_tol = 1e-11
//! rel_tol = 1e-10
//! max_iters = 50
//! ```
//!
//! Optional keys: `initial` (`"projected"` or `"nodal"`), `u0` (`"cosine"`,
//! `"constant"` or `"random"`, used when `manufactured = false`), `u0_value`,
//! `g` (constant fidelity target), `e2_denominator` (`"gradient"` or `"value"`),
//! `timing` (set to `false` for bit-reproducible CSV files) and a `[diagnose]`
//! table with `samples` and `pairs`.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::analysis::E2Denominator;
use crate::experiment::StepRule;
use crate::newton::NewtonConfig;
use crate::solver::InitialPolicy;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Solve,
    Convergence,
    Project,
    Diagnose,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    pub n: Option<usize>,
    pub file: Option<PathBuf>,
    pub sweep: Option<Vec<usize>>,
}

/// Where the mesh (or meshes) come from.
#[derive(Debug, Clone, PartialEq)]
pub enum MeshSource {
    Structured(usize),
    File(PathBuf),
    Sweep(Vec<usize>),
}

impl MeshSource {
    /// Structured sizes or `None` for a file.
    pub fn sizes(&self) -> Option<Vec<usize>> {
        match self {
            Self::Structured(n) => Some(vec![*n]),
            Self::Sweep(ns) => Some(ns.clone()),
            Self::File(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DtRule {
    pub c: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialData {
    #[default]
    Cosine,
    Constant,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
enum InitialKey {
    #[default]
    Projected,
    Nodal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DenominatorKey {
    #[default]
    Gradient,
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    /// Random samples per pointwise inequality.
    pub samples: usize,
    /// Initial-data pairs of the contraction suite.
    pub pairs: usize,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            samples: 100_000,
            pairs: 20,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    mode: Mode,
    #[serde(default)]
    mesh: MeshSection,
    eps: f64,
    #[serde(default = "default_lambda")]
    lambda: f64,
    #[serde(rename = "T")]
    final_time: f64,
    dt: Option<f64>,
    dt_rule: Option<DtRule>,
    #[serde(default)]
    manufactured: bool,
    out_dir: Option<PathBuf>,
    #[serde(default)]
    newton: NewtonConfig,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    initial: InitialKey,
    #[serde(default)]
    u0: InitialData,
    #[serde(default = "default_u0_value")]
    u0_value: f64,
    #[serde(default)]
    g: f64,
    #[serde(default)]
    e2_denominator: DenominatorKey,
    #[serde(default)]
    diagnose: DiagnoseSection,
    #[serde(default = "default_timing")]
    timing: bool,
}

fn default_timing() -> bool {
    true
}

fn default_lambda() -> f64 {
    1.0
}

fn default_u0_value() -> f64 {
    1.0
}

/// A validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub mesh: MeshSource,
    pub epsilon: f64,
    pub lambda: f64,
    pub final_time: f64,
    pub step: StepRule,
    pub manufactured: bool,
    pub out_dir: PathBuf,
    pub newton: NewtonConfig,
    pub seed: u64,
    pub initial: InitialPolicy,
    pub u0: InitialData,
    pub u0_value: f64,
    pub g: f64,
    pub e2_denominator: E2Denominator,
    pub diagnose: DiagnoseSection,
    /// Record wall-clock times; when false the timing column is written as zero so that
    /// outputs are bit-identical across runs.
    pub timing: bool,
}

/// Environment variable overriding `out_dir`.
pub const OUT_DIR_ENV: &str = "TVFLOW_OUT_DIR";

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        Self::from_raw(raw)
    }

    /// Reads and validates `path`; relative mesh files are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        if let MeshSource::File(f) = &mut cfg.mesh {
            if f.is_relative() {
                if let Some(dir) = path.parent() {
                    *f = dir.join(&*f);
                }
            }
        }
        Ok(cfg)
    }

    /// Output directory, honouring [`OUT_DIR_ENV`].
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.out_dir.clone(),
        }
    }

    fn from_raw(raw: RawConfig) -> Result<Self, ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let mesh = match (raw.mesh.n, raw.mesh.file, raw.mesh.sweep) {
            (Some(n), None, None) => MeshSource::Structured(n),
            (None, Some(f), None) => MeshSource::File(f),
            (None, None, Some(s)) => MeshSource::Sweep(s),
            _ => return bad("exactly one of mesh.n, mesh.file, mesh.sweep must be given".into()),
        };
        match &mesh {
            MeshSource::Structured(0) => return bad("mesh.n must be at least 1".into()),
            MeshSource::Sweep(s) if s.is_empty() || s.contains(&0) => {
                return bad("mesh.sweep must be a non-empty list of positive sizes".into())
            }
            _ => {}
        }
        if !(raw.eps > 0.0 && raw.eps.is_finite()) {
            return bad(format!("eps must be positive, got {}", raw.eps));
        }
        if !(raw.lambda >= 0.0 && raw.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", raw.lambda));
        }
        if !(raw.final_time > 0.0 && raw.final_time.is_finite()) {
            return bad(format!("T must be positive, got {}", raw.final_time));
        }
        let step = match (raw.dt, raw.dt_rule) {
            (Some(dt), None) if dt > 0.0 && dt.is_finite() => StepRule::Fixed(dt),
            (Some(dt), None) => return bad(format!("dt must be positive, got {dt}")),
            (None, Some(DtRule { c, beta })) => {
                if !(c > 0.0 && c.is_finite()) {
                    return bad(format!("dt_rule.c must be positive, got {c}"));
                }
                if !(beta > 0.0 && beta <= 2.0) {
                    return bad(format!("dt_rule.beta must lie in (0, 2], got {beta}"));
                }
                StepRule::Power { c, beta }
            }
            _ => return bad("exactly one of dt and dt_rule must be given".into()),
        };
        if let Err(e) = raw.newton.validate() {
            return bad(e.to_string());
        }
        if raw.mode == Mode::Convergence {
            match &mesh {
                MeshSource::Sweep(s) if s.len() >= 2 => {}
                _ => return bad("convergence mode needs mesh.sweep with at least two sizes".into()),
            }
        }
        if !raw.g.is_finite() || !raw.u0_value.is_finite() {
            return bad("g and u0_value must be finite".into());
        }
        Ok(Self {
            mode: raw.mode,
            mesh,
            epsilon: raw.eps,
            lambda: raw.lambda,
            final_time: raw.final_time,
            step,
            manufactured: raw.manufactured,
            out_dir: raw.out_dir.unwrap_or_else(|| PathBuf::from("out")),
            newton: raw.newton,
            seed: raw.seed,
            initial: match raw.initial {
                InitialKey::Projected => InitialPolicy::Projected,
                InitialKey::Nodal => InitialPolicy::Nodal,
            },
            u0: raw.u0,
            u0_value: raw.u0_value,
            g: raw.g,
            e2_denominator: match raw.e2_denominator {
                DenominatorKey::Gradient => E2Denominator::Gradient,
                DenominatorKey::Value => E2Denominator::Value,
            },
            diagnose: raw.diagnose,
            timing: raw.timing,
        })
    }
}
