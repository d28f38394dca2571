use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{hs_norm_sq, CoefficientField};
use crate::error::{Error, Result};
use crate::gaussian::{divergence_from_parts, matrix_divergence_from_parts, GaussianQuadrature, LogIntegral};
use crate::stats::{log_sum_exp, pairwise_sum};

/// Log-space cap above which an exponential integral counts as divergent.
pub const LOG_CAP: f64 = 600.0;
/// Largest share of an integral that may sit on the outermost nodes.
pub const TAIL_TOL: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub field: String,
    pub horizon: f64,
    pub samples: usize,
    pub min_eigenvalue: f64,
    pub declared_c1: Option<f64>,
    pub ellipticity_ok: Option<bool>,
    /// `max (‖σ‖ ∨ |b|) / (1 + |x|)` over the sample set.
    pub growth_ratio: f64,
    pub declared_growth: f64,
    pub growth_ok: bool,
    pub lambda: f64,
    /// `∫₀ᵀ ∫ exp[λ(‖∇σ‖² + |δσ|² + |δb|)] dγ dt`, absent when divergent.
    pub sigma_t: Option<f64>,
    pub log_sigma_t: f64,
    pub tail_fraction: f64,
    /// `sup_u ‖∇σ_u‖` in `L^{2(d+1)}(γ_d)`; reported, not enforced.
    pub grad_sigma_norm: f64,
}

impl ValidationReport {
    pub fn divergent(&self) -> bool {
        self.sigma_t.is_none()
    }
}

/// Quadrature nodes, the origin and points on each axis out to radius 8.
pub fn sample_points(quad: &GaussianQuadrature) -> Vec<Vec<f64>> {
    let d = quad.dim();
    let mut pts: Vec<Vec<f64>> = (0..quad.len()).map(|i| quad.node(i).to_vec()).collect();
    pts.push(vec![0.0; d]);
    for k in 0..d {
        for r in [0.5, 1.0, 2.0, 4.0, 8.0] {
            for s in [-1.0, 1.0] {
                let mut p = vec![0.0; d];
                p[k] = s * r;
                pts.push(p);
            }
        }
    }
    pts
}

/// Trapezoidal weights for an ascending grid.
pub(crate) fn trapezoid_weights(tgrid: &[f64]) -> Vec<f64> {
    let n = tgrid.len();
    let mut w = vec![0.0; n];
    for k in 0..n - 1 {
        let h = 0.5 * (tgrid[k + 1] - tgrid[k]);
        w[k] += h;
        w[k + 1] += h;
    }
    w
}

pub(crate) fn check_tgrid(tgrid: &[f64]) -> Result<()> {
    if tgrid.len() < 2 || tgrid.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(Error::invalid(
            "time grid must be strictly increasing with at least two points",
        ));
    }
    Ok(())
}

/// Checks the existence hypotheses on a sample set and
/// computes `Σ_T` on `tgrid`, which must run from 0 to `T`.
pub fn validate_hypotheses(
    field: &CoefficientField,
    horizon: f64,
    quad: &GaussianQuadrature,
    tgrid: &[f64],
) -> Result<ValidationReport> {
    check_tgrid(tgrid)?;
    if quad.dim() != field.dim() {
        return Err(Error::invalid("quadrature dimension does not match the field"));
    }
    let (d, m) = (field.dim(), field.noise_dim());
    let meta = field.meta();
    let pts = sample_points(quad);
    let mut e = field.workspace();
    let mut min_eig = f64::INFINITY;
    let mut growth: f64 = 0.0;
    for &t in tgrid {
        for x in &pts {
            field.evaluate(t, x, &mut e, true)?;
            let s = DMatrix::from_row_slice(d, m, &e.sigma);
            let a = &s * s.transpose();
            let eig = a.symmetric_eigen().eigenvalues.min();
            min_eig = min_eig.min(eig);
            let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let g = hs_norm_sq(&e.sigma).sqrt().max(hs_norm_sq(&e.drift).sqrt());
            growth = growth.max(g / (1.0 + r));
        }
    }

    let lambda = meta.lambda;
    let power = 2.0 * (d as f64 + 1.0);
    let mut log_terms = Vec::with_capacity(tgrid.len());
    let mut tail: f64 = 0.0;
    let mut grad_norm: f64 = 0.0;
    let weights = trapezoid_weights(tgrid);
    for (&t, &w) in tgrid.iter().zip(&weights) {
        let li: LogIntegral = quad.log_expect(|y| {
            let mut e = field.workspace();
            if field.evaluate(t, y, &mut e, true).is_err() {
                return f64::NAN;
            }
            let ds = matrix_divergence_from_parts(y, &e.sigma, &e.sigma_jac, m);
            let db = divergence_from_parts(y, &e.drift, &e.drift_jac);
            lambda * (hs_norm_sq(&e.sigma_jac) + hs_norm_sq(&ds) + db.abs())
        })?;
        tail = tail.max(li.tail_fraction);
        log_terms.push(w.ln() + li.log_value);
        let mut terms = Vec::with_capacity(quad.len());
        for i in 0..quad.len() {
            let y = quad.node(i);
            field.evaluate(t, y, &mut e, true)?;
            terms.push(quad.weights()[i] * hs_norm_sq(&e.sigma_jac).powf(0.5 * power));
        }
        grad_norm = grad_norm.max(pairwise_sum(&terms).powf(1.0 / power));
    }
    let log_sigma_t = log_sum_exp(&log_terms);
    let divergent = !(log_sigma_t <= LOG_CAP) || tail > TAIL_TOL;
    let declared_growth = meta.growth;
    Ok(ValidationReport {
        field: meta.name.clone(),
        horizon,
        samples: pts.len() * tgrid.len(),
        min_eigenvalue: min_eig,
        declared_c1: meta.c1,
        ellipticity_ok: meta.c1.map(|c| min_eig >= c * (1.0 - 1e-12)),
        growth_ratio: growth,
        declared_growth,
        growth_ok: growth <= declared_growth * (1.0 + 1e-12),
        lambda,
        sigma_t: (!divergent).then(|| log_sigma_t.exp()),
        log_sigma_t,
        tail_fraction: tail,
        grad_sigma_norm: grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{builtin_coefficients, CustomField, FieldParams};
    use crate::quadrature::linspace;
    use approx::assert_relative_eq;

    #[test]
    fn translate_report() {
        let f = builtin_coefficients("translate", 1, &FieldParams::new()).unwrap();
        let q = GaussianQuadrature::default_for(1).unwrap();
        let r = validate_hypotheses(&f, 1.0, &q, &linspace(0.0, 1.0, 5)).unwrap();
        assert_relative_eq!(r.sigma_t.unwrap(), 2f64.sqrt(), max_relative = 1e-8);
        assert_eq!(r.min_eigenvalue, 1.0);
        assert_eq!(r.ellipticity_ok, Some(true));
        assert_relative_eq!(r.growth_ratio, 1.0);
        assert_eq!(r.grad_sigma_norm, 0.0);
    }

    #[test]
    fn growth_ratio_by_construction() {
        let meta = builtin_coefficients("translate", 1, &FieldParams::new())
            .unwrap()
            .meta()
            .clone();
        let f = CustomField::new(meta, |_, _, o| o[0] = 1.0, |_, x, o| o[0] = 2.0 * (1.0 + x[0].abs())).build();
        let q = GaussianQuadrature::default_for(1).unwrap();
        let r = validate_hypotheses(&f, 1.0, &q, &[0.0, 1.0]).unwrap();
        assert_relative_eq!(r.growth_ratio, 2.0, max_relative = 1e-14);
        assert!(!r.growth_ok);
    }

    #[test]
    fn divergent_integrability_is_flagged() {
        let mut p = FieldParams::new();
        p.insert("lambda".into(), crate::coefficients::ParamValue::Scalar(0.6));
        let f = builtin_coefficients("translate", 1, &p).unwrap();
        let q = GaussianQuadrature::default_for(1).unwrap();
        let r = validate_hypotheses(&f, 1.0, &q, &[0.0, 1.0]).unwrap();
        assert!(r.divergent());
    }
}
