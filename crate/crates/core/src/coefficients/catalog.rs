use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{CoefficientField, CoefficientModel, FieldMeta, PointEval, Provided};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

pub type FieldParams = BTreeMap<String, ParamValue>;

pub const CATALOG: &[&str] = &["translate", "ou_linear", "sign_drift", "anisotropic", "custom"];

/// Sign with `sign(0) = 0`, the odd representative of the a.e.-defined sign.
pub(crate) fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct Params<'a> {
    name: &'a str,
    params: &'a FieldParams,
    allowed: &'static [&'static str],
}

impl<'a> Params<'a> {
    fn new(name: &'a str, params: &'a FieldParams, allowed: &'static [&'static str]) -> Result<Self> {
        for key in params.keys() {
            if key != "lambda" && !allowed.contains(&key.as_str()) {
                return Err(Error::invalid(format!("`{name}` has no parameter `{key}`")));
            }
        }
        Ok(Params { name, params, allowed })
    }

    fn scalar(&self, key: &str, default: f64) -> Result<f64> {
        debug_assert!(key == "lambda" || self.allowed.contains(&key));
        match self.params.get(key) {
            None => Ok(default),
            Some(ParamValue::Scalar(v)) if v.is_finite() => Ok(*v),
            Some(_) => Err(Error::invalid(format!("`{}.{key}` must be a finite number", self.name))),
        }
    }

    fn lambda(&self, default: f64) -> Result<f64> {
        let l = self.scalar("lambda", default)?;
        if l <= 0.0 {
            return Err(Error::invalid("lambda must be positive"));
        }
        Ok(l)
    }
}

struct Translate {
    d: usize,
}

impl CoefficientModel for Translate {
    fn eval(&self, _t: f64, _x: &[f64], out: &mut PointEval, derivatives: bool) -> Result<Provided> {
        out.sigma.fill(0.0);
        for i in 0..self.d {
            out.sigma[i * self.d + i] = 1.0;
        }
        out.drift.fill(0.0);
        if derivatives {
            out.sigma_jac.fill(0.0);
            out.drift_jac.fill(0.0);
        }
        Ok(Provided::ALL)
    }
}

struct OuLinear {
    d: usize,
    a: f64,
}

impl CoefficientModel for OuLinear {
    fn eval(&self, _t: f64, x: &[f64], out: &mut PointEval, derivatives: bool) -> Result<Provided> {
        let d = self.d;
        out.sigma.fill(0.0);
        for i in 0..d {
            out.sigma[i * d + i] = 1.0;
            out.drift[i] = -self.a * x[i];
        }
        if derivatives {
            out.sigma_jac.fill(0.0);
            out.drift_jac.fill(0.0);
            for i in 0..d {
                out.drift_jac[i * d + i] = -self.a;
            }
        }
        Ok(Provided::ALL)
    }
}

struct SignDrift {
    d: usize,
    beta: f64,
}

impl CoefficientModel for SignDrift {
    fn eval(&self, _t: f64, x: &[f64], out: &mut PointEval, derivatives: bool) -> Result<Provided> {
        let d = self.d;
        out.sigma.fill(0.0);
        for i in 0..d {
            out.sigma[i * d + i] = 1.0;
        }
        out.drift.fill(0.0);
        out.drift[0] = self.beta * sgn(x[0]);
        if derivatives {
            // The a.e. derivative; the jump carries no pointwise derivative.
            out.sigma_jac.fill(0.0);
            out.drift_jac.fill(0.0);
        }
        Ok(Provided::ALL)
    }
}

struct Anisotropic {
    sigma: Vec<f64>,
}

impl CoefficientModel for Anisotropic {
    fn eval(&self, _t: f64, _x: &[f64], out: &mut PointEval, derivatives: bool) -> Result<Provided> {
        out.sigma.copy_from_slice(&self.sigma);
        out.drift.fill(0.0);
        if derivatives {
            out.sigma_jac.fill(0.0);
            out.drift_jac.fill(0.0);
        }
        Ok(Provided::ALL)
    }
}

/// One-dimensional family `σ(x) = c₀ + c₁ sin(ωx)`,
/// `b(x) = −a x + β sign(x) + b₀`.
struct Custom1d {
    c0: f64,
    c1: f64,
    omega: f64,
    a: f64,
    beta: f64,
    b0: f64,
}

impl CoefficientModel for Custom1d {
    fn eval(&self, _t: f64, x: &[f64], out: &mut PointEval, derivatives: bool) -> Result<Provided> {
        let z = x[0];
        out.sigma[0] = self.c0 + self.c1 * (self.omega * z).sin();
        out.drift[0] = -self.a * z + self.beta * sgn(z) + self.b0;
        if derivatives {
            out.sigma_jac[0] = self.c1 * self.omega * (self.omega * z).cos();
            out.drift_jac[0] = -self.a;
        }
        Ok(Provided::ALL)
    }
}

fn identity_meta(name: &str, d: usize) -> FieldMeta {
    FieldMeta {
        name: name.to_string(),
        dim: d,
        noise_dim: d,
        c1: Some(1.0),
        growth: (d as f64).sqrt(),
        lambda: 0.25,
        sigma_continuous: true,
        measurable_drift: false,
        autonomous: true,
        bounded: true,
    }
}

/// Look up a catalog field. `dim` is ignored by `anisotropic` (taken from
/// the matrix) and must be 1 for `custom`.
pub fn builtin_coefficients(name: &str, dim: usize, params: &FieldParams) -> Result<CoefficientField> {
    if dim == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let df = dim as f64;
    match name {
        "translate" => {
            let p = Params::new(name, params, &[])?;
            let mut meta = identity_meta(name, dim);
            meta.lambda = p.lambda(0.25)?;
            Ok(CoefficientField::from_model(meta, Translate { d: dim }))
        }
        "ou_linear" => {
            let p = Params::new(name, params, &["a"])?;
            let a = p.scalar("a", 1.0)?;
            if a < 0.0 {
                return Err(Error::invalid("ou_linear.a must be non-negative"));
            }
            let mut meta = identity_meta(name, dim);
            meta.growth = df.sqrt().max(a);
            // |δσ|² + |δb| ≤ (1 + a)|x|² + a d
            meta.lambda = p.lambda(0.25 / (1.0 + a))?;
            meta.bounded = a == 0.0;
            Ok(CoefficientField::from_model(meta, OuLinear { d: dim, a }))
        }
        "sign_drift" => {
            let p = Params::new(name, params, &["beta"])?;
            let beta = p.scalar("beta", 1.0)?;
            let mut meta = identity_meta(name, dim);
            meta.growth = df.sqrt().max(beta.abs());
            meta.lambda = p.lambda(0.25)?;
            meta.measurable_drift = true;
            Ok(CoefficientField::from_model(meta, SignDrift { d: dim, beta }))
        }
        "anisotropic" => {
            let p = Params::new(name, params, &["sigma"])?;
            let rows = match params.get("sigma") {
                Some(ParamValue::Matrix(rows)) => rows,
                _ => return Err(Error::invalid("anisotropic needs a `sigma` matrix")),
            };
            let d = rows.len();
            let m = rows.first().map_or(0, Vec::len);
            if d == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
                return Err(Error::invalid(
                    "anisotropic.sigma must be a non-empty rectangular matrix",
                ));
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid("anisotropic.sigma entries must be finite"));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let a = DMatrix::from_row_slice(d, m, &flat);
            let aat = &a * a.transpose();
            let eig = aat.clone().symmetric_eigen().eigenvalues;
            let min_eig = eig.iter().copied().fold(f64::INFINITY, f64::min);
            let max_eig = eig.iter().copied().fold(0.0, f64::max);
            let mut meta = identity_meta(name, d);
            meta.noise_dim = m;
            meta.c1 = (min_eig > 1e-14).then_some(min_eig);
            meta.growth = a.norm();
            // |δσ|² = |Aᵀx|² ≤ ‖A‖²_op |x|²
            meta.lambda = p.lambda(0.25 / max_eig.max(1e-300))?;
            Ok(CoefficientField::from_model(meta, Anisotropic { sigma: flat }))
        }
        "custom" => {
            let p = Params::new(
                name,
                params,
                &[
                    "sigma_const",
                    "sigma_sin",
                    "sigma_freq",
                    "drift_linear",
                    "drift_sign",
                    "drift_const",
                ],
            )?;
            if dim != 1 {
                return Err(Error::invalid("the custom family is one-dimensional"));
            }
            let m = Custom1d {
                c0: p.scalar("sigma_const", 1.0)?,
                c1: p.scalar("sigma_sin", 0.0)?,
                omega: p.scalar("sigma_freq", 1.0)?,
                a: p.scalar("drift_linear", 0.0)?,
                beta: p.scalar("drift_sign", 0.0)?,
                b0: p.scalar("drift_const", 0.0)?,
            };
            let smax = m.c0.abs() + m.c1.abs();
            let smin = m.c0.abs() - m.c1.abs();
            let mut meta = identity_meta(name, 1);
            meta.c1 = (smin > 0.0).then_some(smin * smin);
            meta.growth = smax.max(m.a.abs()).max(m.beta.abs() + m.b0.abs());
            meta.lambda = p.lambda(0.2 / (2.0 * smax * smax + m.a.abs()).max(1e-12))?;
            meta.measurable_drift = m.beta != 0.0;
            meta.bounded = m.a == 0.0;
            Ok(CoefficientField::from_model(meta, m))
        }
        other => Err(Error::UnknownField(other.to_string())),
    }
}
