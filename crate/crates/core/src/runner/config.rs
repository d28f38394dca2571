//! Strict TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coefficients::{
    builtin_coefficients, regularize, regularize_drift, CoefficientField, FieldParams, RegularizationLevel,
};
use crate::density::DensityForm;
use crate::error::{Error, Result};
use crate::gaussian::GaussianQuadrature;
use crate::sde::{InitialPoints, NoiseMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    DensityBound,
    EntropyBudget,
    Coupling,
    Krylov,
    FokkerPlanck,
    Validate,
    OracleSuite,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::DensityBound => "density_bound",
            ExperimentKind::EntropyBudget => "entropy_budget",
            ExperimentKind::Coupling => "coupling",
            ExperimentKind::Krylov => "krylov",
            ExperimentKind::FokkerPlanck => "fokker_planck",
            ExperimentKind::Validate => "validate",
            ExperimentKind::OracleSuite => "oracle_suite",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizePart {
    #[default]
    Both,
    Drift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default)]
    pub params: FieldParams,
    /// Regularization level `n`, if any.
    #[serde(default)]
    pub regularize: Option<u32>,
    #[serde(default)]
    pub regularize_part: RegularizePart,
}

impl FieldSpec {
    pub fn build(&self) -> Result<CoefficientField> {
        let base = builtin_coefficients(&self.name, self.dim, &self.params)?;
        match self.regularize {
            None => Ok(base),
            Some(n) => {
                let level = RegularizationLevel::new(n)?;
                match self.regularize_part {
                    RegularizePart::Both => regularize(&base, level),
                    RegularizePart::Drift => {
                        let quad = if base.meta().measurable_drift {
                            GaussianQuadrature::default_lattice(self.dim)?
                        } else {
                            GaussianQuadrature::default_for(self.dim)?
                        };
                        regularize_drift(&base, level, &quad)
                    }
                }
            }
        }
    }
}

fn one() -> usize {
    1
}

fn default_initials() -> InitialPoints {
    InitialPoints::Sampled { count: 1 }
}

fn default_noise() -> NoiseMode {
    NoiseMode::Independent
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityBoundParams {
    #[serde(default)]
    pub s: f64,
    pub t: f64,
    pub dt: f64,
    pub p: Vec<f64>,
    #[serde(default = "default_initials")]
    pub initials: InitialPoints,
    pub replicas: usize,
    #[serde(default = "default_noise")]
    pub noise: NoiseMode,
    #[serde(default)]
    pub form: Option<DensityForm>,
    /// Gauss–Hermite order per axis for the bound.
    #[serde(default)]
    pub quadrature_order: Option<usize>,
    #[serde(default = "default_time_nodes")]
    pub time_nodes: usize,
}

fn default_time_nodes() -> usize {
    9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyBudgetParams {
    /// Horizon `T`; defaults to `T₀` of the field.
    #[serde(default)]
    pub t: Option<f64>,
    /// Step; defaults to `T / steps`.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_initials")]
    pub initials: InitialPoints,
    pub replicas: usize,
    #[serde(default = "default_noise")]
    pub noise: NoiseMode,
    #[serde(default)]
    pub quadrature_order: Option<usize>,
    #[serde(default = "default_time_nodes")]
    pub time_nodes: usize,
}

fn default_steps() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingParams {
    #[serde(default)]
    pub s: f64,
    pub t: f64,
    pub dt: f64,
    pub x0: Vec<f64>,
    pub trajectories: usize,
    pub levels: Vec<u32>,
    pub n_ref: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrylovParams {
    #[serde(default)]
    pub s: f64,
    pub t: f64,
    pub dt: f64,
    pub x0: Vec<f64>,
    pub trajectories: usize,
    pub lambda: f64,
    /// Spatial corners of the indicator box.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FokkerPlanckParams {
    #[serde(default)]
    pub s: f64,
    pub t: f64,
    pub h: f64,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub tau: Option<f64>,
    pub dt: f64,
    pub trajectories: usize,
    #[serde(default)]
    pub snapshots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateParams {
    pub t: f64,
    #[serde(default = "default_time_nodes")]
    pub time_nodes: usize,
    #[serde(default)]
    pub quadrature_order: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleParams {
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            mc_samples: default_mc_samples(),
        }
    }
}

fn default_mc_samples() -> usize {
    10_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub field: Option<FieldSpec>,
    #[serde(default)]
    pub density_bound: Option<DensityBoundParams>,
    #[serde(default)]
    pub entropy_budget: Option<EntropyBudgetParams>,
    #[serde(default)]
    pub coupling: Option<CouplingParams>,
    #[serde(default)]
    pub krylov: Option<KrylovParams>,
    #[serde(default)]
    pub fokker_planck: Option<FokkerPlanckParams>,
    #[serde(default)]
    pub validate: Option<ValidateParams>,
    #[serde(default)]
    pub oracle_suite: Option<OracleParams>,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("`{name}` must be positive and finite, got {v}")))
    }
}

fn nonzero(name: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(Error::Config(format!("`{name}` must be positive")))
    }
}

fn horizon(section: &str, s: f64, t: f64, dt: f64) -> Result<()> {
    if !s.is_finite() || s < 0.0 {
        return Err(Error::Config(format!(
            "`{section}.s` must be a finite non-negative time"
        )));
    }
    positive(&format!("{section}.t - {section}.s"), t - s)?;
    positive(&format!("{section}.dt"), dt)?;
    if dt > t - s {
        return Err(Error::Config(format!(
            "`{section}.dt` = {dt} exceeds the horizon {}",
            t - s
        )));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn id(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    pub fn field(&self) -> Result<&FieldSpec> {
        self.field
            .as_ref()
            .ok_or_else(|| Error::Config(format!("`{}` needs a [field] section", self.kind.name())))
    }

    pub fn check(&self) -> Result<()> {
        let present: Vec<&str> = [
            ("density_bound", self.density_bound.is_some()),
            ("entropy_budget", self.entropy_budget.is_some()),
            ("coupling", self.coupling.is_some()),
            ("krylov", self.krylov.is_some()),
            ("fokker_planck", self.fokker_planck.is_some()),
            ("validate", self.validate.is_some()),
            ("oracle_suite", self.oracle_suite.is_some()),
        ]
        .into_iter()
        .filter_map(|(n, p)| p.then_some(n))
        .collect();
        if let Some(other) = present.iter().find(|n| **n != self.kind.name()) {
            return Err(Error::Config(format!(
                "section [{other}] does not belong to kind `{}`",
                self.kind.name()
            )));
        }
        if let Some(id) = &self.id {
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Config(format!(
                    "`id` must be a non-empty [A-Za-z0-9_-] string, got {id:?}"
                )));
            }
        }
        if self.kind == ExperimentKind::OracleSuite {
            if let Some(o) = &self.oracle_suite {
                nonzero("oracle_suite.mc_samples", o.mc_samples)?;
            }
            return Ok(());
        }
        let field = self.field()?;
        nonzero("field.dim", field.dim)?;
        let missing = || {
            Error::Config(format!(
                "kind `{}` needs a [{}] section",
                self.kind.name(),
                self.kind.name()
            ))
        };
        match self.kind {
            ExperimentKind::DensityBound => {
                let p = self.density_bound.as_ref().ok_or_else(missing)?;
                horizon("density_bound", p.s, p.t, p.dt)?;
                if p.p.is_empty() {
                    return Err(Error::Config(
                        "`density_bound.p` must list at least one exponent".into(),
                    ));
                }
                for &q in &p.p {
                    if !(q > 1.0 && q.is_finite()) {
                        return Err(Error::Config(format!(
                            "`density_bound.p` entries must exceed 1, got {q}"
                        )));
                    }
                }
                nonzero("density_bound.replicas", p.replicas)?;
                nonzero("density_bound.time_nodes", p.time_nodes.saturating_sub(1))?;
                if let Some(o) = p.quadrature_order {
                    nonzero("density_bound.quadrature_order", o)?;
                }
            }
            ExperimentKind::EntropyBudget => {
                let p = self.entropy_budget.as_ref().ok_or_else(missing)?;
                if let Some(t) = p.t {
                    positive("entropy_budget.t", t)?;
                    if let Some(dt) = p.dt {
                        horizon("entropy_budget", 0.0, t, dt)?;
                    }
                } else if let Some(dt) = p.dt {
                    positive("entropy_budget.dt", dt)?;
                }
                nonzero("entropy_budget.steps", p.steps)?;
                nonzero("entropy_budget.replicas", p.replicas)?;
                nonzero("entropy_budget.time_nodes", p.time_nodes.saturating_sub(1))?;
            }
            ExperimentKind::Coupling => {
                let p = self.coupling.as_ref().ok_or_else(missing)?;
                horizon("coupling", p.s, p.t, p.dt)?;
                nonzero("coupling.trajectories", p.trajectories)?;
                if p.levels.is_empty() || p.levels.iter().chain([&p.n_ref]).any(|&n| n == 0) {
                    return Err(Error::Config(
                        "`coupling.levels` and `coupling.n_ref` must be positive".into(),
                    ));
                }
                if p.x0.len() != field.dim {
                    return Err(Error::Config("`coupling.x0` must have the field dimension".into()));
                }
            }
            ExperimentKind::Krylov => {
                let p = self.krylov.as_ref().ok_or_else(missing)?;
                horizon("krylov", p.s, p.t, p.dt)?;
                nonzero("krylov.trajectories", p.trajectories)?;
                positive("krylov.lambda", p.lambda)?;
                if p.x0.len() != field.dim || p.lo.len() != field.dim || p.hi.len() != field.dim {
                    return Err(Error::Config(
                        "`krylov.x0`, `lo` and `hi` must have the field dimension".into(),
                    ));
                }
                for (a, b) in p.lo.iter().zip(&p.hi) {
                    positive("krylov.hi - krylov.lo", b - a)?;
                }
            }
            ExperimentKind::FokkerPlanck => {
                let p = self.fokker_planck.as_ref().ok_or_else(missing)?;
                horizon("fokker_planck", p.s, p.t, p.dt)?;
                positive("fokker_planck.h", p.h)?;
                if let Some(r) = p.radius {
                    positive("fokker_planck.radius", r)?;
                }
                if let Some(tau) = p.tau {
                    positive("fokker_planck.tau", tau)?;
                }
                nonzero("fokker_planck.trajectories", p.trajectories)?;
            }
            ExperimentKind::Validate => {
                let p = self.validate.as_ref().ok_or_else(missing)?;
                positive("validate.t", p.t)?;
                nonzero("validate.time_nodes", p.time_nodes.saturating_sub(1))?;
            }
            ExperimentKind::OracleSuite => unreachable!(),
        }
        Ok(())
    }
}
