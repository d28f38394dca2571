//! Cutoff, time mollifier and the smoothing pipeline `σ ↦ φ_n P_{1/n} σ`,
//! `b ↦ P_{1/n}(b ∗ χ_n)`.

use std::cell::RefCell;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{CoefficientField, CoefficientModel, FieldMeta, PointEval, Provided};
use crate::error::{Error, Result};
use crate::gaussian::{first_absolute_moment, GaussianQuadrature};
use crate::quadrature::{composite_legendre, simpson};
use crate::stats::pairwise_sum;

/// Simpson nodes used for the time convolution.
pub const MOLLIFIER_NODES: usize = 65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegularizationLevel {
    pub n: u32,
}

impl RegularizationLevel {
    pub fn new(n: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("regularization level must be at least 1"));
        }
        Ok(RegularizationLevel { n })
    }

    /// Spatial smoothing time `ε = 1/n`.
    pub fn eps(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn time_scale(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn radius(&self) -> f64 {
        self.n as f64
    }
}

fn raw_bump(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - u * u)).exp()
    }
}

fn bump_constant() -> f64 {
    static C: OnceLock<f64> = OnceLock::new();
    *C.get_or_init(|| {
        let (x, w) = composite_legendre(-1.0, 1.0, 64, 12);
        let terms: Vec<f64> = x.iter().zip(&w).map(|(u, w)| w * raw_bump(*u)).collect();
        1.0 / pairwise_sum(&terms)
    })
}

/// `χ(u) = c exp(−1/(1−u²))` on `(−1, 1)`, unit mass.
pub fn bump(u: f64) -> f64 {
    bump_constant() * raw_bump(u)
}

/// `∫_{−1}^{v} χ`.
pub fn bump_cdf(v: f64) -> f64 {
    if v <= -1.0 {
        return 0.0;
    }
    if v >= 1.0 {
        return 1.0;
    }
    if v > 0.0 {
        return 1.0 - bump_cdf(-v);
    }
    let (x, w) = composite_legendre(-1.0, v, 32, 12);
    let terms: Vec<f64> = x.iter().zip(&w).map(|(u, w)| w * bump(*u)).collect();
    pairwise_sum(&terms)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Radial cutoff: 1 on `|x| ≤ n`, 0 on `|x| ≥ n + 2`, slope at most
/// `max χ = c/e ≈ 0.83`.
pub fn cutoff(n: u32, x: &[f64]) -> f64 {
    let u = norm(x) - n as f64;
    if u <= 0.0 {
        1.0
    } else if u >= 2.0 {
        0.0
    } else {
        1.0 - bump_cdf(u - 1.0)
    }
}

pub fn cutoff_gradient(n: u32, x: &[f64], out: &mut [f64]) {
    let r = norm(x);
    let u = r - n as f64;
    if u <= 0.0 || u >= 2.0 {
        out.fill(0.0);
        return;
    }
    let slope = -bump(u - 1.0) / r;
    for (o, xi) in out.iter_mut().zip(x) {
        *o = slope * xi;
    }
}

/// `χ_n(t) = n χ(n t)`.
pub fn time_mollifier(n: u32, t: f64) -> f64 {
    let nf = n as f64;
    nf * bump(nf * t)
}

/// Offsets `r_i` and weights `w_i` (summing to one) with
/// `(f ∗ χ_n)(t) ≈ Σ w_i f(t − r_i)`.
fn mollifier_rule(n: u32) -> Vec<(f64, f64)> {
    let half = 1.0 / n as f64;
    let (rs, ws) = simpson(-half, half, MOLLIFIER_NODES);
    let raw: Vec<f64> = rs.iter().zip(&ws).map(|(r, w)| w * time_mollifier(n, *r)).collect();
    let total = pairwise_sum(&raw);
    rs.into_iter().zip(raw).map(|(r, w)| (r, w / total)).collect()
}

/// Share of the mollifier that lands on `u = t − r ≥ 0`; the regularised
/// autonomous drift is this factor times the smoothed drift.
pub fn mollifier_mass(n: u32, t: f64) -> f64 {
    let terms: Vec<f64> = mollifier_rule(n)
        .into_iter()
        .filter(|(r, _)| t - r >= 0.0)
        .map(|(_, w)| w)
        .collect();
    pairwise_sum(&terms)
}

thread_local! {
    static SCRATCH: RefCell<Vec<PointEval>> = const { RefCell::new(Vec::new()) };
}

/// Run `f` with a per-thread workspace shaped for `field`.
fn with_scratch<R>(field: &CoefficientField, f: impl FnOnce(&RefCell<&mut PointEval>) -> R) -> R {
    let (d, m) = (field.dim(), field.noise_dim());
    let mut s = SCRATCH
        .with(|p| p.borrow_mut().pop())
        .filter(|s| s.drift.len() == d && s.sigma.len() == d * m)
        .unwrap_or_else(|| field.workspace());
    let r = f(&RefCell::new(&mut s));
    SCRATCH.with(|p| {
        let mut p = p.borrow_mut();
        if p.len() < 8 {
            p.push(s);
        }
    });
    r
}

fn prefix_masses(rule: &[(f64, f64)]) -> Vec<f64> {
    let w: Vec<f64> = rule.iter().map(|(_, w)| *w).collect();
    (0..=w.len()).map(|k| pairwise_sum(&w[..k])).collect()
}

struct RegularizedSigma {
    base: CoefficientField,
    n: u32,
    quad: GaussianQuadrature,
}

impl CoefficientModel for RegularizedSigma {
    fn eval(&self, t: f64, x: &[f64], out: &mut PointEval, derivatives: bool) -> Result<Provided> {
        let (d, m) = (self.base.dim(), self.base.noise_dim());
        self.base.evaluate(t, x, out, derivatives)?;
        let phi = cutoff(self.n, x);
        if phi == 0.0 {
            out.sigma.fill(0.0);
            out.sigma_jac.fill(0.0);
            return Ok(Provided::ALL);
        }
        let mut val = [0.0; 8];
        let mut jac = [0.0; 16];
        let (val, jac) = (&mut val[..d * m], &mut jac[..d * m * d]);
        let eps = 1.0 / self.n as f64;
        with_scratch(&self.base, |scratch| {
            let f = |z: &[f64], o: &mut [f64]| {
                let mut s = scratch.borrow_mut();
                match self.base.evaluate(t, z, &mut s, false) {
                    Ok(()) => o.copy_from_slice(&s.sigma),
                    Err(_) => o.fill(f64::NAN),
                }
            };
            self.quad
                .smooth(&f, d * m, eps, x, val, derivatives.then_some(&mut jac[..]))
        })?;
        for (o, v) in out.sigma.iter_mut().zip(val.iter()) {
            *o = phi * v;
        }
        if derivatives {
            let mut g = [0.0; 2];
            cutoff_gradient(self.n, x, &mut g[..d]);
            for i in 0..d {
                for j in 0..m {
                    for k in 0..d {
                        out.sigma_jac[j * d * d + i * d + k] = g[k] * val[i * m + j] + phi * jac[(i * m + j) * d + k];
                    }
                }
            }
        }
        Ok(Provided::ALL)
    }
}

struct RegularizedDrift {
    base: CoefficientField,
    n: u32,
    quad: GaussianQuadrature,
    rule: Vec<(f64, f64)>,
    /// `prefix[k]` is the weight of the first `k` rule nodes.
    prefix: Vec<f64>,
}

impl CoefficientModel for RegularizedDrift {
    fn eval(&self, t: f64, x: &[f64], out: &mut PointEval, derivatives: bool) -> Result<Provided> {
        let d = self.base.dim();
        self.base.evaluate(t, x, out, derivatives)?;
        // Offsets are increasing, so `t − r ≥ 0` selects a prefix.
        let k = self.rule.partition_point(|(r, _)| t - r >= 0.0);
        let mass = self.prefix[k];
        if mass <= 0.0 {
            out.drift.fill(0.0);
            out.drift_jac.fill(0.0);
            return Ok(Provided::ALL);
        }
        let active = &self.rule[..k];
        let autonomous = self.base.meta().autonomous;
        let mut val = [0.0; 2];
        let mut jac = [0.0; 4];
        let (val, jac) = (&mut val[..d], &mut jac[..d * d]);
        let eps = 1.0 / self.n as f64;
        with_scratch(&self.base, |scratch| {
            let f = |z: &[f64], o: &mut [f64]| {
                let mut s = scratch.borrow_mut();
                if autonomous {
                    match self.base.evaluate(t, z, &mut s, false) {
                        Ok(()) => o.copy_from_slice(&s.drift),
                        Err(_) => o.fill(f64::NAN),
                    }
                } else {
                    o.fill(0.0);
                    for (r, w) in active {
                        if *w == 0.0 {
                            continue;
                        }
                        if self.base.evaluate(t - r, z, &mut s, false).is_err() {
                            o.fill(f64::NAN);
                            return;
                        }
                        for (oi, bi) in o.iter_mut().zip(&s.drift) {
                            *oi += w * bi;
                        }
                    }
                }
            };
            self.quad
                .smooth(&f, d, eps, x, val, derivatives.then_some(&mut jac[..]))
        })?;
        let scale = if autonomous { mass } else { 1.0 };
        for (o, v) in out.drift.iter_mut().zip(val.iter()) {
            *o = scale * v;
        }
        if derivatives {
            for (o, v) in out.drift_jac.iter_mut().zip(jac.iter()) {
                *o = scale * v;
            }
        }
        Ok(Provided::ALL)
    }
}

fn regularized_meta(base: &FieldMeta, suffix: String) -> Result<FieldMeta> {
    let m1 = first_absolute_moment(base.dim)?;
    let mut meta = base.clone();
    meta.name = format!("{}/{}", base.name, suffix);
    meta.growth = base.growth * (1.0 + m1);
    meta.lambda = base.lambda / (2.0 * std::f64::consts::E);
    meta.sigma_continuous = true;
    Ok(meta)
}

/// `σ^n = φ_n P_{1/n} σ`, drift unchanged.
pub fn regularize_sigma(
    field: &CoefficientField,
    level: RegularizationLevel,
    quad: &GaussianQuadrature,
) -> Result<CoefficientField> {
    if !field.meta().sigma_continuous {
        return Err(Error::invalid("σ regularization needs a jointly continuous σ"));
    }
    if field.dim() > 2 || field.noise_dim() > 4 {
        return Err(Error::invalid("regularization supports d ≤ 2 and m ≤ 4"));
    }
    if quad.dim() != field.dim() {
        return Err(Error::invalid("quadrature dimension does not match the field"));
    }
    let mut meta = regularized_meta(field.meta(), format!("sigma_n{}", level.n))?;
    meta.c1 = None;
    meta.bounded = true;
    Ok(CoefficientField::from_model(
        meta,
        RegularizedSigma {
            base: field.clone(),
            n: level.n,
            quad: quad.clone(),
        },
    ))
}

/// `b^n_t = P_{1/n}((b ∗ χ_n)(t))` with `b ≡ 0` for `t < 0`; `σ` unchanged.
pub fn regularize_drift(
    field: &CoefficientField,
    level: RegularizationLevel,
    quad: &GaussianQuadrature,
) -> Result<CoefficientField> {
    if field.dim() > 2 || field.noise_dim() > 4 {
        return Err(Error::invalid("regularization supports d ≤ 2 and m ≤ 4"));
    }
    if quad.dim() != field.dim() {
        return Err(Error::invalid("quadrature dimension does not match the field"));
    }
    let mut meta = regularized_meta(field.meta(), format!("drift_n{}", level.n))?;
    meta.measurable_drift = false;
    meta.autonomous = false;
    meta.c1 = field.meta().c1;
    let rule = mollifier_rule(level.n);
    Ok(CoefficientField::from_model(
        meta,
        RegularizedDrift {
            base: field.clone(),
            n: level.n,
            quad: quad.clone(),
            prefix: prefix_masses(&rule),
            rule,
        },
    ))
}

/// `σ^n` and `b^n` smoothed side by side from the same base field.
struct Regularized {
    sigma: CoefficientField,
    drift: CoefficientField,
}

impl CoefficientModel for Regularized {
    fn eval(&self, t: f64, x: &[f64], out: &mut PointEval, derivatives: bool) -> Result<Provided> {
        self.sigma.evaluate(t, x, out, derivatives)?;
        with_scratch(&self.drift, |s| {
            let mut s = s.borrow_mut();
            self.drift.evaluate(t, x, &mut s, derivatives)?;
            out.drift.copy_from_slice(&s.drift);
            if derivatives {
                out.drift_jac.copy_from_slice(&s.drift_jac);
            }
            Ok::<(), Error>(())
        })?;
        Ok(Provided::ALL)
    }
}

/// Both regularizations with default rules: the lattice for measurable
/// drifts and Gauss–Hermite otherwise.
pub fn regularize(field: &CoefficientField, level: RegularizationLevel) -> Result<CoefficientField> {
    let d = field.dim();
    let drift_quad = if field.meta().measurable_drift {
        GaussianQuadrature::default_lattice(d)?
    } else {
        GaussianQuadrature::default_for(d)?
    };
    let sigma_quad = GaussianQuadrature::default_for(d)?;
    let drift = regularize_drift(field, level, &drift_quad)?;
    let sigma = regularize_sigma(field, level, &sigma_quad)?;
    let mut meta = regularized_meta(field.meta(), format!("n{}", level.n))?;
    meta.c1 = None;
    meta.bounded = true;
    meta.measurable_drift = false;
    meta.autonomous = false;
    Ok(CoefficientField::from_model(meta, Regularized { sigma, drift }))
}

/// `‖b_a − b_b‖` in `L^p([t₀, t_K] × γ_d)` with trapezoidal time weights
/// on `tgrid`.
pub fn drift_distance(
    a: &CoefficientField,
    b: &CoefficientField,
    power: f64,
    quad: &GaussianQuadrature,
    tgrid: &[f64],
) -> Result<f64> {
    if tgrid.len() < 2 {
        return Err(Error::invalid("time grid needs at least two points"));
    }
    let mut ea = a.workspace();
    let mut eb = b.workspace();
    let mut per_time = Vec::with_capacity(tgrid.len());
    for &t in tgrid {
        let mut terms = Vec::with_capacity(quad.len());
        for i in 0..quad.len() {
            let y = quad.node(i);
            a.evaluate(t, y, &mut ea, false)?;
            b.evaluate(t, y, &mut eb, false)?;
            let diff: f64 = ea
                .drift
                .iter()
                .zip(&eb.drift)
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
                .sqrt();
            terms.push(quad.weights()[i] * diff.powf(power));
        }
        per_time.push(pairwise_sum(&terms));
    }
    let mut acc = Vec::with_capacity(tgrid.len() - 1);
    for k in 0..tgrid.len() - 1 {
        acc.push(0.5 * (tgrid[k + 1] - tgrid[k]) * (per_time[k] + per_time[k + 1]));
    }
    Ok(pairwise_sum(&acc).powf(1.0 / power))
}
