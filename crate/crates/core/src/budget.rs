//! Constants of the entropy budget.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::coefficients::{validate_hypotheses, CoefficientField, LOG_CAP};
use crate::density::time_weights;
use crate::error::{Error, Result};
use crate::gaussian::{divergence_from_parts, first_absolute_moment, m2_constant, GaussianQuadrature};
use crate::stats::log_sum_exp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundBudget {
    pub horizon: f64,
    pub growth: f64,
    pub lambda: f64,
    pub sigma_t: f64,
    pub m1: f64,
    pub m2: f64,
    pub t0: f64,
    pub lambda_t0: f64,
    pub c1: f64,
    pub c2: f64,
    pub n_tilde: u32,
    /// `2 C₁ T^{1/2} Λ + C₂ T Λ²`.
    pub entropy_bound: f64,
    /// `entropy_bound + 2/e`, the bound for `∫E(K|log K|)dγ`.
    pub entropy_bound_abs: f64,
}

/// `T₀ = 1/(112 L(1+L)) ∧ λ/(8e²)`.
pub fn t0(growth: f64, lambda: f64) -> f64 {
    (1.0 / (112.0 * growth * (1.0 + growth))).min(lambda / (8.0 * E * E))
}

/// Smallest `N ≥ 1` with `T ≤ N T₀`.
pub fn n_tilde(horizon: f64, t0: f64) -> u32 {
    let r = horizon / t0;
    let n = r.ceil();
    // T = N T₀ up to rounding still counts as N.
    let n = if n - r > 1.0 - 1e-9 { n - 1.0 } else { n };
    n.max(1.0) as u32
}

/// `‖g‖_{L^q([0,T]×γ_d)}` in log space.
fn log_norm(
    field: &CoefficientField,
    quad: &GaussianQuadrature,
    tgrid: &[f64],
    weights: &[f64],
    q: f64,
    g: impl Fn(&[f64], &crate::coefficients::PointEval) -> f64,
) -> Result<f64> {
    let mut terms = Vec::with_capacity(tgrid.len() * quad.len());
    let mut e = field.workspace();
    for (&t, &wt) in tgrid.iter().zip(weights) {
        for (i, &wi) in quad.weights().iter().enumerate() {
            let y = quad.node(i);
            field.evaluate(t, y, &mut e, true)?;
            let v = g(y, &e);
            if !v.is_finite() {
                return Err(Error::non_finite("budget norm integrand", y));
            }
            if v > 0.0 && wt > 0.0 && wi > 0.0 {
                terms.push(wt.ln() + wi.ln() + q * v.ln());
            }
        }
    }
    Ok(log_sum_exp(&terms) / q)
}

/// Every constant of the entropy budget for `field` on `[0, horizon]`,
/// with `L` and `λ` taken from the field metadata and `Σ_T` computed on
/// `tgrid` (which must run from 0 to `horizon`).
pub fn budget_constants(
    field: &CoefficientField,
    horizon: f64,
    quad: &GaussianQuadrature,
    tgrid: &[f64],
) -> Result<BoundBudget> {
    let d = field.dim();
    if d > 2 {
        return Err(Error::invalid("budget constants need d ≤ 2"));
    }
    if !(horizon > 0.0) {
        return Err(Error::invalid("horizon must be positive"));
    }
    let weights = time_weights(tgrid, 0.0, horizon)?;
    let meta = field.meta();
    let (growth, lambda) = (meta.growth, meta.lambda);
    let report = validate_hypotheses(field, horizon, quad, tgrid)?;
    let sigma_t = report.sigma_t.ok_or(Error::Divergent {
        quantity: "Σ_T".into(),
        log_value: report.log_sigma_t,
        tail_fraction: report.tail_fraction,
    })?;
    let m1 = first_absolute_moment(d)?;
    let m2 = m2_constant(d)?;
    let t0 = t0(growth, lambda);
    let lambda_t0 = (m2 * sigma_t / t0).powf(1.0 / 12.0);
    let n = n_tilde(horizon, t0);
    if n > 30 {
        return Err(Error::invalid(format!(
            "horizon is {n} multiples of T₀; norms of order 2^{n} are not computable"
        )));
    }
    let m = field.noise_dim();
    let q1 = 2f64.powi(n as i32 + 1);
    let q2 = 2f64.powi(n as i32);
    let log_c1 = log_norm(field, quad, tgrid, &weights, q1, |y, e| {
        let hs: f64 = e.sigma.iter().map(|v| v * v).sum();
        let mut ds = 0.0;
        for j in 0..m {
            let mut acc = 0.0;
            for i in 0..d {
                acc += e.sigma[i * m + j] * y[i] - e.sigma_jac[j * d * d + i * d + i];
            }
            ds += acc * acc;
        }
        hs.sqrt() + E * ds.sqrt()
    })?;
    let log_c2 = log_norm(field, quad, tgrid, &weights, q2, |y, e| {
        let b: f64 = e.drift.iter().map(|v| v * v).sum::<f64>().sqrt();
        let db = divergence_from_parts(y, &e.drift, &e.drift_jac).abs();
        let hs: f64 = e.sigma.iter().map(|v| v * v).sum();
        let grad: f64 = e.sigma_jac.iter().map(|v| v * v).sum();
        b + E * db + 1.5 * hs + grad
    })?;
    if log_c1 > LOG_CAP || log_c2 > LOG_CAP {
        return Err(Error::Divergent {
            quantity: "C₁/C₂".into(),
            log_value: log_c1.max(log_c2),
            tail_fraction: f64::NAN,
        });
    }
    let (c1, c2) = (log_c1.exp(), log_c2.exp());
    let entropy_bound = 2.0 * c1 * horizon.sqrt() * lambda_t0 + c2 * horizon * lambda_t0 * lambda_t0;
    Ok(BoundBudget {
        horizon,
        growth,
        lambda,
        sigma_t,
        m1,
        m2,
        t0,
        lambda_t0,
        c1,
        c2,
        n_tilde: n,
        entropy_bound,
        entropy_bound_abs: entropy_bound + 2.0 / E,
    })
}
