//! Experiment configuration: a TOML document with `[model]`,
//! `[integrator]`, `[experiment]` and `[output]` tables. Unknown keys are
//! rejected. Every key is optional; command-line flags take precedence.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::flow::{IntegratorConfig, Method};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("config: {0}")]
    Parse(String),
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
}

impl ConfigError {
    pub fn field(field: &str, message: impl Into<String>) -> Self {
        Self::Field { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub integrator: IntegratorSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub epsilon: Option<f64>,
    pub alpha: Option<f64>,
    pub mu: Option<f64>,
    /// Regularization family; only `arctan` (k = 1) ships.
    pub family: Option<String>,
    /// Algebraic order used by the k-parameterized chart formulas.
    pub k: Option<u32>,
    /// `slider`, `curved`, `normal-form` or `benchmark`.
    pub system: Option<String>,
    pub g0: Option<f64>,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    pub rel_tol: Option<f64>,
    pub abs_tol: Option<f64>,
    /// `explicit` (Dormand-Prince) or `stiff` (SDIRK).
    pub method: Option<String>,
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: Option<String>,
    pub x: Option<Vec<f64>>,
    pub p: Option<Vec<f64>>,
    pub epsilons: Option<Vec<f64>>,
    pub rho: Option<Vec<f64>>,
    pub alpha213: Option<f64>,
    pub t_end: Option<f64>,
    pub y0: Option<f64>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: Option<PathBuf>,
    /// Significant digits in CSV output.
    pub precision: Option<usize>,
}

pub const DEFAULT_PRECISION: usize = 17;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        for (name, v) in [("model.epsilon", m.epsilon), ("model.alpha", m.alpha), ("model.lambda", m.lambda)] {
            positive(name, v)?;
        }
        if let Some(f) = &m.family {
            if f != "arctan" {
                return Err(ConfigError::field("model.family", format!("unknown family `{f}`")));
            }
        }
        if let Some(k) = m.k {
            if !(1..=4).contains(&k) {
                return Err(ConfigError::field("model.k", format!("{k} outside 1..=4")));
            }
        }
        if let Some(s) = &m.system {
            if !SYSTEMS.contains(&s.as_str()) {
                return Err(ConfigError::field("model.system", format!("unknown system `{s}`, expected one of {SYSTEMS:?}")));
            }
        }
        let i = &self.integrator;
        for (name, v) in [("integrator.rel_tol", i.rel_tol), ("integrator.abs_tol", i.abs_tol)] {
            if let Some(v) = v {
                if !(1e-16..=1e-2).contains(&v) {
                    return Err(ConfigError::field(name, format!("{v} outside [1e-16, 1e-2]")));
                }
            }
        }
        if let Some(s) = &i.method {
            if s != "explicit" && s != "stiff" {
                return Err(ConfigError::field("integrator.method", format!("`{s}`, expected `explicit` or `stiff`")));
            }
        }
        let e = &self.experiment;
        positive("experiment.alpha213", e.alpha213)?;
        positive("experiment.t_end", e.t_end)?;
        for (name, v) in [("experiment.epsilons", &e.epsilons), ("experiment.rho", &e.rho)] {
            if let Some(v) = v {
                if v.is_empty() || v.iter().any(|x| !(*x > 0.0)) {
                    return Err(ConfigError::field(name, format!("{v:?} must be non-empty and positive")));
                }
            }
        }
        if let Some(p) = self.output.precision {
            if !(1..=17).contains(&p) {
                return Err(ConfigError::field("output.precision", format!("{p} outside 1..=17")));
            }
        }
        Ok(())
    }

    /// Integrator settings with the `[integrator]` overrides applied to `base`.
    pub fn integrator_config(&self, base: IntegratorConfig) -> IntegratorConfig {
        let i = &self.integrator;
        let mut c = base;
        if let Some(v) = i.rel_tol {
            c.rel_tol = v;
        }
        if let Some(v) = i.abs_tol {
            c.abs_tol = v;
        }
        if let Some(v) = i.max_steps {
            c.max_steps = v;
        }
        match i.method.as_deref() {
            Some("stiff") => c.method = Method::ImplicitStiff,
            Some("explicit") => c.method = Method::AdaptiveExplicit,
            _ => {}
        }
        c
    }

    pub fn precision(&self) -> usize {
        self.output.precision.unwrap_or(DEFAULT_PRECISION)
    }
}

pub const SYSTEMS: [&str; 4] = ["slider", "curved", "normal-form", "benchmark"];

fn positive(name: &str, v: Option<f64>) -> Result<(), ConfigError> {
    match v {
        Some(x) if !(x > 0.0) => Err(ConfigError::field(name, format!("{x} must be > 0"))),
        _ => Ok(()),
    }
}
