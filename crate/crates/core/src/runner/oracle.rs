//! Closed-form oracle values, each checked against an independent
//! recomputation.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::budget::t0;
use crate::coefficients::{builtin_coefficients, FieldParams, ParamValue};
use crate::density::{log_density_stratonovich, theorem_bound_rhs};
use crate::error::Result;
use crate::fokker_planck::{fp_solve, truncation_radius, FPGrid, FPOptions};
use crate::gaussian::{first_absolute_moment, m2_constant, GaussianQuadrature};
use crate::rng::{normal_cdf, Domain, Stream};
use crate::sde::{sample_brownian, simulate, TimeGrid};
use crate::stats::batch_estimate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub name: String,
    pub closed_form: f64,
    pub recomputed: f64,
    /// Largest admissible `|closed_form − recomputed|`.
    pub tolerance: f64,
}

impl OracleRow {
    fn new(name: &str, closed_form: f64, recomputed: f64, tolerance: f64) -> Self {
        OracleRow {
            name: name.to_string(),
            closed_form,
            recomputed,
            tolerance,
        }
    }

    fn relative(name: &str, closed_form: f64, recomputed: f64, rel: f64) -> Self {
        Self::new(name, closed_form, recomputed, rel * closed_form.abs().max(1.0))
    }

    pub fn discrepancy(&self) -> f64 {
        (self.closed_form - self.recomputed).abs()
    }

    pub fn pass(&self) -> bool {
        self.discrepancy() <= self.tolerance
    }
}

/// `M_1 = √2 Γ((d+1)/2) / Γ(d/2)`.
pub fn m1_closed(d: usize) -> f64 {
    let df = d as f64;
    2f64.sqrt() * (ln_gamma(0.5 * (df + 1.0)) - ln_gamma(0.5 * df)).exp()
}

/// `M_2` for `d ∈ {1, 2}`, completing the square in the radial integral.
pub fn m2_closed(d: usize) -> Option<f64> {
    let c = normal_cdf(1.0 / 2f64.sqrt());
    match d {
        1 => Some(2.0 * 2f64.sqrt() * 0.5f64.exp() * c),
        2 => Some(0.5f64.exp() * (2.0 * (-0.25f64).exp() + 2.0 * PI.sqrt() * c)),
        _ => None,
    }
}

/// `‖K_{s,t}‖_{L^p(P×γ₁)}` for the translate field, `(1 − p(p−1)τ)^{−1/(2p)}`.
pub fn translate_lp(p: f64, tau: f64) -> f64 {
    (1.0 - p * (p - 1.0) * tau).powf(-0.5 / p)
}

/// `‖K‖_{L^p}` for `dX = −aX dt + dw` in `d = 1`: the flow is `αx + Z` with
/// `α = e^{−aτ}`, `Z ~ N(0, v)`, and `∫K^p dγ = α^{−p} A^{−1/2} e^{cZ²/2}`
/// with `A = p/α² − (p−1)`, `c = p(p−1)/(α² A)`.
pub fn ou_lp(a: f64, p: f64, tau: f64) -> f64 {
    let alpha = (-a * tau).exp();
    let v = -(-2.0 * a * tau).exp_m1() / (2.0 * a);
    let big_a = p / (alpha * alpha) - (p - 1.0);
    let c = p * (p - 1.0) / (alpha * alpha * big_a);
    (alpha.powf(-p) * big_a.powf(-0.5) * (1.0 - c * v).powf(-0.5)).powf(1.0 / p)
}

/// Theorem RHS for the translate field: the integrand is
/// `pτ(1 + 2(p−1)x²)`, so the mean is `e^{pτ}(1 − 4p(p−1)τ)^{−1/2}`.
pub fn translate_bound(p: f64, tau: f64) -> f64 {
    let mean = (p * tau).exp() * (1.0 - 4.0 * p * (p - 1.0) * tau).powf(-0.5);
    mean.powf((p - 1.0) / (p * (2.0 * p - 1.0)))
}

/// `∫ ∫ exp((p−1)·log K(X(x))) dγ(x) dP` by a 2-D Hermite rule over `(x, ξ)`
/// for the affine flow `x ↦ αx + √v ξ`.
fn affine_lp_by_quadrature(alpha: f64, v: f64, p: f64) -> Result<f64> {
    let q = GaussianQuadrature::gauss_hermite(2, 64)?;
    let li = q.log_expect(|y| {
        let (x, z) = (y[0], y[1] * v.sqrt());
        let xt = alpha * x + z;
        // log K(y) = log φ_{α²}(y − Z) − log φ(y)
        let log_k = -alpha.ln() - 0.5 * (xt - z) * (xt - z) / (alpha * alpha) + 0.5 * xt * xt;
        (p - 1.0) * log_k
    })?;
    Ok((li.log_value / p).exp())
}

pub fn oracle_suite(seed: u64, mc_samples: usize) -> Result<Vec<OracleRow>> {
    let mut rows = Vec::new();
    for d in [1, 2] {
        rows.push(OracleRow::relative(
            &format!("m1_d{d}"),
            m1_closed(d),
            first_absolute_moment(d)?,
            1e-10,
        ));
        if let Some(m2) = m2_closed(d) {
            rows.push(OracleRow::relative(&format!("m2_d{d}"), m2, m2_constant(d)?, 1e-10));
        }
    }
    let gh = GaussianQuadrature::gauss_hermite(1, 64)?;
    let a: f64 = 0.3;
    rows.push(OracleRow::relative(
        "gaussian_exponential_a0.3",
        (1.0 - 2.0 * a).powf(-0.5),
        gh.log_expect(|y| a * y[0] * y[0])?.value(),
        1e-9,
    ));
    rows.push(OracleRow::relative("t0_l1_lambda1", 1.0 / 224.0, t0(1.0, 1.0), 1e-15));

    for tau in [0.1, 0.25] {
        rows.push(OracleRow::relative(
            &format!("translate_l2_tau{tau}_quadrature"),
            translate_lp(2.0, tau),
            affine_lp_by_quadrature(1.0, tau, 2.0)?,
            1e-8,
        ));
    }
    // E K̃^{-1} has finite variance for τ < 1/6, so the plain MC check uses τ = 0.1.
    let tau: f64 = 0.1;
    let mut rng = Stream::new(seed, Domain::Oracle, 0);
    let values: Vec<f64> = (0..mc_samples)
        .map(|_| {
            let x = rng.normal();
            let w = tau.sqrt() * rng.normal();
            (x * w + 0.5 * w * w).exp()
        })
        .collect();
    let est = batch_estimate(&values);
    let sq = translate_lp(2.0, tau).powi(2);
    rows.push(OracleRow::new(
        "translate_l2sq_tau0.1_mc",
        sq,
        est.mean,
        4.0 * est.stderr,
    ));

    let a_ou: f64 = 1.0;
    let tau: f64 = 0.1;
    let alpha = (-a_ou * tau).exp();
    let v = -(-2.0 * a_ou * tau).exp_m1() / (2.0 * a_ou);
    rows.push(OracleRow::relative(
        "ou_l2_a1_tau0.1_quadrature",
        ou_lp(a_ou, 2.0, tau),
        affine_lp_by_quadrature(alpha, v, 2.0)?,
        1e-8,
    ));

    let mut params = FieldParams::new();
    params.insert("lambda".into(), ParamValue::Scalar(0.25));
    let translate = builtin_coefficients("translate", 1, &params)?;
    for (p, tau) in [(2.0, 0.1), (1.5, 0.25)] {
        rows.push(OracleRow::relative(
            &format!("translate_bound_p{p}_tau{tau}"),
            translate_bound(p, tau),
            theorem_bound_rhs(&translate, 0.0, tau, p, &gh, &[0.0, tau])?,
            1e-8,
        ));
    }

    let grid = TimeGrid::new(0.0, 0.25, 1e-3)?;
    let mut worst: f64 = 0.0;
    for i in 0..64u64 {
        let x0 = [Stream::new(seed, Domain::Oracle, 1 + i).normal()];
        let path = sample_brownian(grid, 1, seed, i);
        let traj = simulate(&translate, &x0, &path)?;
        let rec = log_density_stratonovich(&translate, &traj, &path)?;
        let w = path.total()[0];
        let exact = x0[0] * w + 0.5 * w * w;
        worst = worst.max((-rec.log_k_tilde - exact).abs());
    }
    rows.push(OracleRow::new("translate_path_density_stratonovich", 0.0, worst, 1e-9));

    let t = 1.0;
    let h = 0.05;
    let radius = (truncation_radius(1.0, 0.0, t) / h).ceil() * h;
    let sol = fp_solve(
        &translate,
        &FPGrid::gaussian(1, radius, h)?,
        0.0,
        t,
        &FPOptions::default(),
    )?;
    let (_, var) = sol.last().moments();
    rows.push(OracleRow::new("heat_variance_t1", 1.0 + t, var, 1e-2 * (1.0 + t)));
    rows.push(OracleRow::new("heat_mass_audit", 0.0, sol.mass_audit, 1e-10));
    rows.push(OracleRow::new("two_over_e", 2.0 / E, 2.0 * (-1.0f64).exp(), 1e-16));
    Ok(rows)
}
