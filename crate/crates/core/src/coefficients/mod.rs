//! Coefficient pairs `(σ_t, b_t)` with derivative access and metadata.

mod catalog;
mod regularize;
mod validate;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use catalog::{builtin_coefficients, FieldParams, ParamValue, CATALOG};
pub use regularize::{
    bump, bump_cdf, cutoff, cutoff_gradient, drift_distance, mollifier_mass, regularize, regularize_drift,
    regularize_sigma, time_mollifier, RegularizationLevel, MOLLIFIER_NODES,
};
pub(crate) use validate::{check_tgrid, trapezoid_weights};
pub use validate::{sample_points, validate_hypotheses, ValidationReport, LOG_CAP, TAIL_TOL};

use crate::error::{Error, Result};
use crate::gaussian::{
    divergence_from_parts, fd_step, matrix_divergence_from_parts, MatrixFieldHandle, VectorFieldHandle,
};

/// Values and first derivatives of `(σ, b)` at one space-time point.
///
/// Layouts: `sigma[i * m + j] = σ^{ij}`, `sigma_jac[j * d * d + i * d + k] =
/// ∂_k σ^{ij}`, `drift_jac[i * d + k] = ∂_k b^i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEval {
    pub sigma: Vec<f64>,
    pub drift: Vec<f64>,
    pub sigma_jac: Vec<f64>,
    pub drift_jac: Vec<f64>,
}

impl PointEval {
    pub fn new(d: usize, m: usize) -> Self {
        PointEval {
            sigma: vec![0.0; d * m],
            drift: vec![0.0; d],
            sigma_jac: vec![0.0; m * d * d],
            drift_jac: vec![0.0; d * d],
        }
    }

    pub fn dim(&self) -> usize {
        self.drift.len()
    }

    pub fn noise_dim(&self) -> usize {
        self.sigma.len() / self.drift.len()
    }
}

/// Which Jacobians a model filled analytically.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Provided {
    pub sigma_jac: bool,
    pub drift_jac: bool,
}

impl Provided {
    pub const ALL: Provided = Provided {
        sigma_jac: true,
        drift_jac: true,
    };
    pub const NONE: Provided = Provided {
        sigma_jac: false,
        drift_jac: false,
    };
}

/// A concrete coefficient pair. Implementations fill `sigma` and `drift`
/// always and the Jacobians they can when `derivatives` is set.
pub trait CoefficientModel: Send + Sync {
    fn eval(&self, t: f64, x: &[f64], out: &mut PointEval, derivatives: bool) -> Result<Provided>;
}

/// Constants and flags attached to a field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub name: String,
    pub dim: usize,
    pub noise_dim: usize,
    /// Ellipticity constant `c₁`, absent for validation-only fields.
    pub c1: Option<f64>,
    /// Growth constant `L_T`.
    pub growth: f64,
    /// Exponential-integrability constant `λ_T`.
    pub lambda: f64,
    pub sigma_continuous: bool,
    /// Drift is only measurable; smoothing must not assume continuity.
    pub measurable_drift: bool,
    pub autonomous: bool,
    /// `σ` and `b` bounded on all of `R^d`.
    pub bounded: bool,
}

#[derive(Clone)]
pub struct CoefficientField {
    model: Arc<dyn CoefficientModel>,
    meta: FieldMeta,
    finite_differences: bool,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientField")
            .field("meta", &self.meta)
            .finish_non_exhaustive()
    }
}

type SigmaFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

struct ClosureModel {
    sigma: Box<SigmaFn>,
    drift: Box<SigmaFn>,
    sigma_jac: Option<Box<SigmaFn>>,
    drift_jac: Option<Box<SigmaFn>>,
}

impl CoefficientModel for ClosureModel {
    fn eval(&self, t: f64, x: &[f64], out: &mut PointEval, derivatives: bool) -> Result<Provided> {
        (self.sigma)(t, x, &mut out.sigma);
        (self.drift)(t, x, &mut out.drift);
        let mut p = Provided::NONE;
        if derivatives {
            if let Some(j) = &self.sigma_jac {
                j(t, x, &mut out.sigma_jac);
                p.sigma_jac = true;
            }
            if let Some(j) = &self.drift_jac {
                j(t, x, &mut out.drift_jac);
                p.drift_jac = true;
            }
        }
        Ok(p)
    }
}

/// Builder for fields defined by closures.
pub struct CustomField {
    meta: FieldMeta,
    model: ClosureModel,
}

impl CustomField {
    pub fn new(
        meta: FieldMeta,
        sigma: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        drift: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        CustomField {
            meta,
            model: ClosureModel {
                sigma: Box::new(sigma),
                drift: Box::new(drift),
                sigma_jac: None,
                drift_jac: None,
            },
        }
    }

    pub fn sigma_jacobian(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.model.sigma_jac = Some(Box::new(f));
        self
    }

    pub fn drift_jacobian(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.model.drift_jac = Some(Box::new(f));
        self
    }

    pub fn build(self) -> CoefficientField {
        CoefficientField::from_model(self.meta, self.model)
    }
}

impl CoefficientField {
    pub fn from_model(meta: FieldMeta, model: impl CoefficientModel + 'static) -> Self {
        CoefficientField {
            model: Arc::new(model),
            meta,
            finite_differences: true,
        }
    }

    pub fn without_finite_differences(mut self) -> Self {
        self.finite_differences = false;
        self
    }

    pub fn meta(&self) -> &FieldMeta {
        &self.meta
    }

    pub fn with_meta(mut self, f: impl FnOnce(&mut FieldMeta)) -> Self {
        f(&mut self.meta);
        self
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.meta.noise_dim
    }

    pub fn name(&self) -> &str {
        &self.meta.name
    }

    pub fn workspace(&self) -> PointEval {
        PointEval::new(self.meta.dim, self.meta.noise_dim)
    }

    /// Evaluate `σ`, `b` and, when asked, both Jacobians. Jacobians the model
    /// does not provide are filled by central differences.
    pub fn evaluate(&self, t: f64, x: &[f64], out: &mut PointEval, derivatives: bool) -> Result<()> {
        let provided = self.model.eval(t, x, out, derivatives)?;
        if out.sigma.iter().chain(&out.drift).any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("coefficients of `{}`", self.meta.name), x));
        }
        if derivatives && provided != Provided::ALL {
            if !self.finite_differences {
                return Err(Error::MissingDerivative(format!("Jacobians of `{}`", self.meta.name)));
            }
            self.fd_fill(t, x, out, provided)?;
        }
        Ok(())
    }

    fn fd_fill(&self, t: f64, x: &[f64], out: &mut PointEval, provided: Provided) -> Result<()> {
        let (d, m) = (self.meta.dim, self.meta.noise_dim);
        let h = fd_step(x);
        let mut plus = self.workspace();
        let mut minus = self.workspace();
        let mut xp = x.to_vec();
        for k in 0..d {
            xp[k] = x[k] + h;
            self.model.eval(t, &xp, &mut plus, false)?;
            xp[k] = x[k] - h;
            self.model.eval(t, &xp, &mut minus, false)?;
            xp[k] = x[k];
            if !provided.sigma_jac {
                for i in 0..d {
                    for j in 0..m {
                        out.sigma_jac[j * d * d + i * d + k] =
                            (plus.sigma[i * m + j] - minus.sigma[i * m + j]) / (2.0 * h);
                    }
                }
            }
            if !provided.drift_jac {
                for i in 0..d {
                    out.drift_jac[i * d + k] = (plus.drift[i] - minus.drift[i]) / (2.0 * h);
                }
            }
        }
        Ok(())
    }

    pub fn sigma(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut e = self.workspace();
        self.evaluate(t, x, &mut e, false)?;
        Ok(e.sigma)
    }

    pub fn drift(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut e = self.workspace();
        self.evaluate(t, x, &mut e, false)?;
        Ok(e.drift)
    }

    /// `δ(b_t)(x)`.
    pub fn drift_divergence(&self, t: f64, x: &[f64]) -> Result<f64> {
        let mut e = self.workspace();
        self.evaluate(t, x, &mut e, true)?;
        Ok(divergence_from_parts(x, &e.drift, &e.drift_jac))
    }

    /// `δ(σ_t)(x) ∈ R^m`.
    pub fn sigma_divergence(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut e = self.workspace();
        self.evaluate(t, x, &mut e, true)?;
        Ok(matrix_divergence_from_parts(
            x,
            &e.sigma,
            &e.sigma_jac,
            self.meta.noise_dim,
        ))
    }

    /// `σ_t` frozen in time as a matrix field handle.
    pub fn sigma_handle(&self, t: f64) -> MatrixFieldHandle {
        let (d, m) = (self.meta.dim, self.meta.noise_dim);
        let ev = self.clone();
        let jf = self.clone();
        let h = MatrixFieldHandle::new(d, m, move |x, out| {
            let mut e = ev.workspace();
            match ev.evaluate(t, x, &mut e, false) {
                Ok(()) => out.copy_from_slice(&e.sigma),
                Err(_) => out.fill(f64::NAN),
            }
        })
        .with_column_jacobians(move |x, out| {
            let mut e = jf.workspace();
            match jf.evaluate(t, x, &mut e, true) {
                Ok(()) => out.copy_from_slice(&e.sigma_jac),
                Err(_) => out.fill(f64::NAN),
            }
        });
        if self.finite_differences {
            h
        } else {
            h.without_finite_differences()
        }
    }

    /// `b_t` frozen in time as a vector field handle.
    pub fn drift_handle(&self, t: f64) -> VectorFieldHandle {
        let ev = self.clone();
        let jf = self.clone();
        let mut h = VectorFieldHandle::new(self.meta.dim, move |x, out| {
            let mut e = ev.workspace();
            match ev.evaluate(t, x, &mut e, false) {
                Ok(()) => out.copy_from_slice(&e.drift),
                Err(_) => out.fill(f64::NAN),
            }
        })
        .with_jacobian(move |x, out| {
            let mut e = jf.workspace();
            match jf.evaluate(t, x, &mut e, true) {
                Ok(()) => out.copy_from_slice(&e.drift_jac),
                Err(_) => out.fill(f64::NAN),
            }
        });
        h.differentiable = !self.meta.measurable_drift;
        h
    }
}

/// Frobenius norm of a flat slice.
pub(crate) fn hs_norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}
