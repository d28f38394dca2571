//! Gaussian reference measure: quadrature, the Gaussian divergence and the
//! Ornstein–Uhlenbeck semigroup.

use std::fmt;
use std::sync::Arc;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::quadrature::{composite_legendre, gauss_hermite};
use crate::rng::{Domain, Stream};
use crate::stats::{log_sum_exp, pairwise_sum};

/// Largest tensor rule we are willing to materialise.
const MAX_NODES: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq)]
pub enum RuleKind {
    GaussHermite {
        order: usize,
    },
    /// Midpoint lattice with `per_sigma` nodes per standard deviation,
    /// truncated at `half_width` standard deviations. Used for fields that
    /// are only measurable: the smoothed output stays smooth in `x` and its
    /// gradient is exactly the derivative of the value.
    Lattice {
        per_sigma: usize,
        half_width: f64,
    },
    MonteCarlo {
        samples: usize,
        seed: u64,
    },
}

/// An immutable rule for integrals against `γ_d`.
#[derive(Clone)]
pub struct GaussianQuadrature {
    dim: usize,
    kind: RuleKind,
    points: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    outer: Vec<bool>,
}

impl fmt::Debug for GaussianQuadrature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GaussianQuadrature")
            .field("dim", &self.dim)
            .field("kind", &self.kind)
            .field("nodes", &self.len())
            .finish()
    }
}

/// Result of a log-space quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogIntegral {
    pub log_value: f64,
    /// Share of the sum carried by the outermost nodes. Large values mean the
    /// integrand grows faster than the rule can resolve.
    pub tail_fraction: f64,
}

impl LogIntegral {
    pub fn value(&self) -> f64 {
        self.log_value.exp()
    }

    /// Divergence test used everywhere a bound is computed.
    pub fn check(self, quantity: &str, cap: f64, tail_tol: f64) -> Result<Self> {
        if !(self.log_value <= cap) || self.tail_fraction > tail_tol {
            return Err(Error::Divergent {
                quantity: quantity.to_string(),
                log_value: self.log_value,
                tail_fraction: self.tail_fraction,
            });
        }
        Ok(self)
    }
}

fn multi_index_next(idx: &mut [usize], n: usize) -> bool {
    for v in idx.iter_mut().rev() {
        *v += 1;
        if *v < n {
            return true;
        }
        *v = 0;
    }
    false
}

fn mixed_radix_next(idx: &mut [usize], lens: &[usize]) -> bool {
    for (v, &n) in idx.iter_mut().zip(lens).rev() {
        *v += 1;
        if *v < n {
            return true;
        }
        *v = 0;
    }
    false
}

impl GaussianQuadrature {
    /// Tensor Gauss–Hermite rule with `order` nodes per axis.
    pub fn gauss_hermite(dim: usize, order: usize) -> Result<Self> {
        if dim == 0 || order == 0 {
            return Err(Error::invalid("quadrature dimension and order must be positive"));
        }
        let total = order
            .checked_pow(dim as u32)
            .filter(|&t| t <= MAX_NODES)
            .ok_or_else(|| Error::invalid(format!("{order}^{dim} tensor nodes is too many")))?;
        let rule = gauss_hermite(order);
        let mut points = Vec::with_capacity(total * dim);
        let mut log_weights = Vec::with_capacity(total);
        let mut outer = Vec::with_capacity(total);
        let mut idx = vec![0usize; dim];
        loop {
            let mut lw = 0.0;
            let mut edge = false;
            for &i in &idx {
                points.push(rule.nodes[i]);
                lw += rule.log_weights[i];
                edge |= i == 0 || i == order - 1;
            }
            log_weights.push(lw);
            outer.push(edge);
            if !multi_index_next(&mut idx, order) {
                break;
            }
        }
        let weights = log_weights.iter().map(|l| l.exp()).collect();
        Ok(GaussianQuadrature {
            dim,
            kind: RuleKind::GaussHermite { order },
            points,
            weights,
            log_weights,
            outer,
        })
    }

    /// Midpoint lattice rule, weights normalised to unit mass.
    pub fn lattice(dim: usize, per_sigma: usize, half_width: f64) -> Result<Self> {
        if dim == 0 || per_sigma == 0 || !(half_width > 0.0) {
            return Err(Error::invalid("lattice parameters must be positive"));
        }
        let h = 1.0 / per_sigma as f64;
        let half = (half_width / h).ceil() as usize;
        let axis: Vec<f64> = (0..2 * half).map(|j| (j as f64 - half as f64 + 0.5) * h).collect();
        let n = axis.len();
        let total = n
            .checked_pow(dim as u32)
            .filter(|&t| t <= MAX_NODES)
            .ok_or_else(|| Error::invalid("lattice has too many nodes"))?;
        let mut points = Vec::with_capacity(total * dim);
        let mut log_weights = Vec::with_capacity(total);
        let mut outer = Vec::with_capacity(total);
        let mut idx = vec![0usize; dim];
        loop {
            let mut lw = 0.0;
            let mut edge = false;
            for &i in &idx {
                points.push(axis[i]);
                lw -= 0.5 * axis[i] * axis[i];
                edge |= i == 0 || i == n - 1;
            }
            log_weights.push(lw);
            outer.push(edge);
            if !multi_index_next(&mut idx, n) {
                break;
            }
        }
        let lse = log_sum_exp(&log_weights);
        for lw in &mut log_weights {
            *lw -= lse;
        }
        let weights = log_weights.iter().map(|l| l.exp()).collect();
        Ok(GaussianQuadrature {
            dim,
            kind: RuleKind::Lattice { per_sigma, half_width },
            points,
            weights,
            log_weights,
            outer,
        })
    }

    /// Equal-weight sample rule drawn from the quadrature random domain.
    pub fn monte_carlo(dim: usize, samples: usize, seed: u64) -> Result<Self> {
        if dim == 0 || samples == 0 {
            return Err(Error::invalid("Monte-Carlo rule needs positive dimension and samples"));
        }
        let mut stream = Stream::new(seed, Domain::Quadrature, dim as u64);
        let mut points = vec![0.0; samples * dim];
        stream.fill_normal(&mut points);
        let w = 1.0 / samples as f64;
        // The outer shell is the 1% of samples with the largest norm.
        let mut norms: Vec<(f64, usize)> = points
            .chunks(dim)
            .enumerate()
            .map(|(i, p)| (p.iter().map(|v| v * v).sum::<f64>(), i))
            .collect();
        norms.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut outer = vec![false; samples];
        for &(_, i) in norms.iter().take(samples.div_ceil(100)) {
            outer[i] = true;
        }
        Ok(GaussianQuadrature {
            dim,
            kind: RuleKind::MonteCarlo { samples, seed },
            points,
            weights: vec![w; samples],
            log_weights: vec![w.ln(); samples],
            outer,
        })
    }

    /// Gauss–Hermite 32 in d=1, 16 per axis in d=2, 4096 samples beyond.
    pub fn default_for(dim: usize) -> Result<Self> {
        match dim {
            1 => Self::gauss_hermite(1, 32),
            2 => Self::gauss_hermite(2, 16),
            _ => Self::monte_carlo(dim, 4096, 0),
        }
    }

    /// Lattice with 4 nodes per standard deviation out to 8 deviations.
    pub fn default_lattice(dim: usize) -> Result<Self> {
        Self::lattice(dim, 4, 8.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &RuleKind {
        &self.kind
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Highest total degree integrated exactly, if any.
    pub fn exactness_degree(&self) -> Option<usize> {
        match self.kind {
            RuleKind::GaussHermite { order } => Some(2 * order - 1),
            RuleKind::Lattice { .. } => Some(1),
            RuleKind::MonteCarlo { .. } => Some(0),
        }
    }

    /// `Σ w_i g(node_i)`.
    pub fn expect(&self, g: impl Fn(&[f64]) -> f64) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.len());
        for (i, w) in self.weights.iter().enumerate() {
            let y = self.node(i);
            let v = g(y);
            if !v.is_finite() {
                return Err(Error::non_finite("Gaussian expectation", y));
            }
            terms.push(w * v);
        }
        Ok(pairwise_sum(&terms))
    }

    /// `log Σ w_i exp(log_g(node_i))` with max-shift accumulation.
    pub fn log_expect(&self, log_g: impl Fn(&[f64]) -> f64) -> Result<LogIntegral> {
        let mut terms = Vec::with_capacity(self.len());
        for (i, lw) in self.log_weights.iter().enumerate() {
            let y = self.node(i);
            let v = log_g(y);
            if v.is_nan() || v == f64::INFINITY {
                return Err(Error::non_finite("log-space Gaussian expectation", y));
            }
            terms.push(lw + v);
        }
        let total = log_sum_exp(&terms);
        let edge: Vec<f64> = terms
            .iter()
            .zip(&self.outer)
            .filter(|(_, &o)| o)
            .map(|(t, _)| *t)
            .collect();
        let tail = if total == f64::NEG_INFINITY {
            0.0
        } else {
            (log_sum_exp(&edge) - total).exp()
        };
        Ok(LogIntegral {
            log_value: total,
            tail_fraction: tail,
        })
    }

    /// `P_ε f(x)` for an `out_dim`-valued `f`, optionally with its Jacobian
    /// `jac[r * d + k] = ∂_k (P_ε f_r)(x)`.
    ///
    /// Gauss–Hermite and sample rules differentiate through Gaussian
    /// integration by parts; the lattice rule differentiates its own
    /// normalised weights, so its Jacobian is exact for the value it returns.
    pub fn smooth(
        &self,
        f: &dyn Fn(&[f64], &mut [f64]),
        out_dim: usize,
        eps: f64,
        x: &[f64],
        value: &mut [f64],
        jac: Option<&mut [f64]>,
    ) -> Result<()> {
        if !(eps > 0.0) {
            return Err(Error::invalid(format!(
                "smoothing parameter must be positive, got {eps}"
            )));
        }
        if x.len() != self.dim || value.len() != out_dim {
            return Err(Error::invalid("dimension mismatch in OU smoothing"));
        }
        let decay = (-eps).exp();
        let s = (-(-2.0 * eps).exp_m1()).sqrt();
        match self.kind {
            RuleKind::Lattice { per_sigma, half_width } => {
                self.smooth_lattice(f, out_dim, decay, s, per_sigma, half_width, x, value, jac)
            }
            _ => self.smooth_nodes(f, out_dim, decay, s, x, value, jac),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn smooth_nodes(
        &self,
        f: &dyn Fn(&[f64], &mut [f64]),
        out_dim: usize,
        decay: f64,
        s: f64,
        x: &[f64],
        value: &mut [f64],
        mut jac: Option<&mut [f64]>,
    ) -> Result<()> {
        let d = self.dim;
        let mut z = vec![0.0; d];
        let mut fz = vec![0.0; out_dim];
        value.fill(0.0);
        if let Some(j) = jac.as_deref_mut() {
            j.fill(0.0);
        }
        for (i, &w) in self.weights.iter().enumerate() {
            let y = self.node(i);
            for k in 0..d {
                z[k] = decay * x[k] + s * y[k];
            }
            f(&z, &mut fz);
            if fz.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite("OU smoothing integrand", &z));
            }
            for r in 0..out_dim {
                value[r] += w * fz[r];
            }
            if let Some(j) = jac.as_deref_mut() {
                for r in 0..out_dim {
                    let wf = w * fz[r];
                    for k in 0..d {
                        j[r * d + k] += wf * y[k];
                    }
                }
            }
        }
        if let Some(j) = jac {
            let scale = decay / s;
            for v in j.iter_mut() {
                *v *= scale;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn smooth_lattice(
        &self,
        f: &dyn Fn(&[f64], &mut [f64]),
        out_dim: usize,
        decay: f64,
        s: f64,
        per_sigma: usize,
        half_width: f64,
        x: &[f64],
        value: &mut [f64],
        jac: Option<&mut [f64]>,
    ) -> Result<()> {
        let d = self.dim;
        let h = s / per_sigma as f64;
        let delta = 1.0 / per_sigma as f64;
        let ratio_step = (-delta * delta).exp();
        if d == 1 && out_dim <= 8 {
            return smooth_lattice_1d(f, out_dim, decay, x[0], s, h, delta, ratio_step, half_width, value, jac);
        }
        // Per-axis lattice coordinates and unnormalised weights.
        let mut axes: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(d);
        for &xk in x.iter().take(d) {
            let mu = decay * xk;
            let lo = ((mu - half_width * s) / h).floor() as i64;
            let hi = ((mu + half_width * s) / h).ceil() as i64;
            let mut zs = Vec::with_capacity((hi - lo + 1) as usize);
            let mut ws = Vec::with_capacity((hi - lo + 1) as usize);
            let z0 = (lo as f64 + 0.5) * h;
            let r0 = (z0 - mu) / s;
            let mut w = (-0.5 * r0 * r0).exp();
            let mut ratio = (-r0 * delta - 0.5 * delta * delta).exp();
            for j in lo..=hi {
                zs.push((j as f64 + 0.5) * h);
                ws.push(w);
                w *= ratio;
                ratio *= ratio_step;
            }
            axes.push((zs, ws));
        }
        let mu: Vec<f64> = x.iter().map(|v| decay * v).collect();
        let mut z = vec![0.0; d];
        let mut fz = vec![0.0; out_dim];
        let mut mass = 0.0;
        let mut acc = vec![0.0; out_dim];
        // First moments sum w f (z - mu) and sum w (z - mu).
        let mut acc_fz = vec![0.0; out_dim * d];
        let mut acc_z = vec![0.0; d];
        let mut idx = vec![0usize; d];
        let lens: Vec<usize> = axes.iter().map(|a| a.0.len()).collect();
        loop {
            let mut w = 1.0;
            for k in 0..d {
                z[k] = axes[k].0[idx[k]];
                w *= axes[k].1[idx[k]];
            }
            f(&z, &mut fz);
            if fz.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite("OU smoothing integrand", &z));
            }
            mass += w;
            for r in 0..out_dim {
                acc[r] += w * fz[r];
            }
            if jac.is_some() {
                for k in 0..d {
                    let dz = z[k] - mu[k];
                    acc_z[k] += w * dz;
                    for r in 0..out_dim {
                        acc_fz[r * d + k] += w * fz[r] * dz;
                    }
                }
            }
            if !mixed_radix_next(&mut idx, &lens) {
                break;
            }
        }
        for r in 0..out_dim {
            value[r] = acc[r] / mass;
        }
        if let Some(j) = jac {
            let scale = decay / (s * s * mass);
            for r in 0..out_dim {
                for k in 0..d {
                    j[r * d + k] = scale * (acc_fz[r * d + k] - value[r] * acc_z[k]);
                }
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn smooth_lattice_1d(
    f: &dyn Fn(&[f64], &mut [f64]),
    out_dim: usize,
    decay: f64,
    x: f64,
    s: f64,
    h: f64,
    delta: f64,
    ratio_step: f64,
    half_width: f64,
    value: &mut [f64],
    jac: Option<&mut [f64]>,
) -> Result<()> {
    let mu = decay * x;
    let lo = ((mu - half_width * s) / h).floor() as i64;
    let hi = ((mu + half_width * s) / h).ceil() as i64;
    let r0 = ((lo as f64 + 0.5) * h - mu) / s;
    let mut w = (-0.5 * r0 * r0).exp();
    let mut ratio = (-r0 * delta - 0.5 * delta * delta).exp();
    let mut fz = [0.0; 8];
    let mut acc = [0.0; 8];
    let mut acc_fz = [0.0; 8];
    let (mut mass, mut acc_z) = (0.0, 0.0);
    let fz = &mut fz[..out_dim];
    for j in lo..=hi {
        let z = (j as f64 + 0.5) * h;
        f(std::slice::from_ref(&z), fz);
        if fz.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("OU smoothing integrand", &[z]));
        }
        mass += w;
        let dz = z - mu;
        acc_z += w * dz;
        for r in 0..out_dim {
            acc[r] += w * fz[r];
            acc_fz[r] += w * fz[r] * dz;
        }
        w *= ratio;
        ratio *= ratio_step;
    }
    for r in 0..out_dim {
        value[r] = acc[r] / mass;
    }
    if let Some(j) = jac {
        let scale = decay / (s * s * mass);
        for r in 0..out_dim {
            j[r] = scale * (acc_fz[r] - value[r] * acc_z);
        }
    }
    Ok(())
}

/// `∫ g dγ_d` with the given rule.
pub fn gauss_expectation(g: impl Fn(&[f64]) -> f64, quad: &GaussianQuadrature) -> Result<f64> {
    quad.expect(g)
}

/// `P_ε f(x)` for a vector-valued `f`.
pub fn ou_smooth(
    f: &dyn Fn(&[f64], &mut [f64]),
    out_dim: usize,
    eps: f64,
    x: &[f64],
    quad: &GaussianQuadrature,
) -> Result<Vec<f64>> {
    let mut v = vec![0.0; out_dim];
    quad.smooth(f, out_dim, eps, x, &mut v, None)?;
    Ok(v)
}

/// `P_ε f(x)` for a scalar `f`.
pub fn ou_smooth_scalar(f: impl Fn(&[f64]) -> f64, eps: f64, x: &[f64], quad: &GaussianQuadrature) -> Result<f64> {
    let g = |z: &[f64], out: &mut [f64]| out[0] = f(z);
    Ok(ou_smooth(&g, 1, eps, x, quad)?[0])
}

pub type FieldFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Scale-aware central-difference step.
pub fn fd_step(x: &[f64]) -> f64 {
    1e-5 * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Central-difference Jacobian `jac[r * d + k] = ∂_k f_r(x)`.
pub fn fd_jacobian(f: &dyn Fn(&[f64], &mut [f64]), out_dim: usize, x: &[f64], jac: &mut [f64]) {
    let d = x.len();
    let h = fd_step(x);
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; out_dim];
    let mut fm = vec![0.0; out_dim];
    for k in 0..d {
        xp[k] = x[k] + h;
        f(&xp, &mut fp);
        xp[k] = x[k] - h;
        f(&xp, &mut fm);
        xp[k] = x[k];
        for r in 0..out_dim {
            jac[r * d + k] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
}

/// A vector field `B: R^d → R^d`.
#[derive(Clone)]
pub struct VectorFieldHandle {
    dim: usize,
    eval: FieldFn,
    jacobian: Option<FieldFn>,
    /// Declared membership in the Sobolev class; not verified.
    pub differentiable: bool,
    pub finite_differences: bool,
}

impl VectorFieldHandle {
    pub fn new(dim: usize, eval: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        VectorFieldHandle {
            dim,
            eval: Arc::new(eval),
            jacobian: None,
            differentiable: true,
            finite_differences: true,
        }
    }

    /// Analytic Jacobian, row-major `J[i * d + k] = ∂_k B_i`.
    pub fn with_jacobian(mut self, jac: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    pub fn without_finite_differences(mut self) -> Self {
        self.finite_differences = false;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.eval)(x, out)
    }

    pub fn jacobian(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match (&self.jacobian, self.finite_differences) {
            (Some(j), _) => j(x, out),
            (None, true) => fd_jacobian(&*self.eval, self.dim, x, out),
            (None, false) => return Err(Error::MissingDerivative("vector field Jacobian".into())),
        }
        Ok(())
    }

    /// Largest relative deviation of the analytic Jacobian from central
    /// differences over `points`.
    pub fn jacobian_mismatch(&self, points: &[Vec<f64>]) -> Result<f64> {
        let j = self
            .jacobian
            .as_ref()
            .ok_or_else(|| Error::MissingDerivative("analytic Jacobian".into()))?;
        let d = self.dim;
        let mut a = vec![0.0; d * d];
        let mut n = vec![0.0; d * d];
        let mut worst: f64 = 0.0;
        for x in points {
            j(x, &mut a);
            fd_jacobian(&*self.eval, d, x, &mut n);
            let scale = a.iter().map(|v| v.abs()).fold(1.0, f64::max);
            for (u, v) in a.iter().zip(&n) {
                worst = worst.max((u - v).abs() / scale);
            }
        }
        Ok(worst)
    }
}

/// A matrix field `σ: R^d → R^{d×m}`, stored row-major `σ[i * m + j]`.
#[derive(Clone)]
pub struct MatrixFieldHandle {
    dim: usize,
    cols: usize,
    eval: FieldFn,
    column_jacobians: Option<FieldFn>,
    pub finite_differences: bool,
}

impl MatrixFieldHandle {
    pub fn new(dim: usize, cols: usize, eval: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        MatrixFieldHandle {
            dim,
            cols,
            eval: Arc::new(eval),
            column_jacobians: None,
            finite_differences: true,
        }
    }

    /// Analytic column Jacobians, `out[j * d * d + i * d + k] = ∂_k σ^{ij}`.
    pub fn with_column_jacobians(mut self, jac: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.column_jacobians = Some(Arc::new(jac));
        self
    }

    pub fn without_finite_differences(mut self) -> Self {
        self.finite_differences = false;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.eval)(x, out)
    }

    pub fn column_jacobians(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let (d, m) = (self.dim, self.cols);
        match (&self.column_jacobians, self.finite_differences) {
            (Some(j), _) => j(x, out),
            (None, true) => {
                let mut full = vec![0.0; d * m * d];
                fd_jacobian(&*self.eval, d * m, x, &mut full);
                for i in 0..d {
                    for j in 0..m {
                        for k in 0..d {
                            out[j * d * d + i * d + k] = full[(i * m + j) * d + k];
                        }
                    }
                }
            }
            (None, false) => return Err(Error::MissingDerivative("matrix column Jacobians".into())),
        }
        Ok(())
    }
}

/// `δ(B)(x) = ⟨B(x), x⟩ − tr ∇B(x)`.
pub fn gauss_divergence(b: &VectorFieldHandle, x: &[f64]) -> Result<f64> {
    let d = b.dim();
    let mut v = vec![0.0; d];
    let mut j = vec![0.0; d * d];
    b.eval(x, &mut v);
    b.jacobian(x, &mut j)?;
    Ok(divergence_from_parts(x, &v, &j))
}

/// Columnwise `δ(σ)(x) ∈ R^m`.
pub fn matrix_divergence(sigma: &MatrixFieldHandle, x: &[f64]) -> Result<Vec<f64>> {
    let (d, m) = (sigma.dim(), sigma.cols());
    let mut s = vec![0.0; d * m];
    let mut j = vec![0.0; m * d * d];
    sigma.eval(x, &mut s);
    sigma.column_jacobians(x, &mut j)?;
    Ok(matrix_divergence_from_parts(x, &s, &j, m))
}

/// `⟨v, x⟩ − tr J` for a `d × d` row-major `J`.
pub fn divergence_from_parts(x: &[f64], v: &[f64], jac: &[f64]) -> f64 {
    let d = x.len();
    let mut acc = 0.0;
    for i in 0..d {
        acc += v[i] * x[i] - jac[i * d + i];
    }
    acc
}

pub(crate) fn matrix_divergence_from_parts(x: &[f64], sigma: &[f64], col_jac: &[f64], m: usize) -> Vec<f64> {
    let d = x.len();
    (0..m)
        .map(|j| {
            let mut acc = 0.0;
            for i in 0..d {
                acc += sigma[i * m + j] * x[i] - col_jac[j * d * d + i * d + i];
            }
            acc
        })
        .collect()
}

/// `∫_0^∞ g(r) dP(|Y| ∈ dr)` for `Y ~ γ_d`, by composite Gauss–Legendre on
/// `[0, 40]`. Suited to integrands that depend on `|y|` only, where tensor
/// Hermite rules converge slowly because of the kink at the origin.
pub fn radial_expectation(dim: usize, g: impl Fn(f64) -> f64) -> Result<f64> {
    if dim == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let df = dim as f64;
    let log_norm = (0.5 * df - 1.0) * 2f64.ln() + ln_gamma(0.5 * df);
    let (nodes, weights) = composite_legendre(0.0, 40.0, 400, 10);
    let mut terms = Vec::with_capacity(nodes.len());
    for (r, w) in nodes.iter().zip(&weights) {
        let dens = ((df - 1.0) * r.ln() - 0.5 * r * r - log_norm).exp();
        let v = g(*r);
        if !v.is_finite() {
            return Err(Error::non_finite("radial Gaussian expectation", &[*r]));
        }
        terms.push(w * dens * v);
    }
    Ok(pairwise_sum(&terms))
}

/// `M_1 = ∫ |y| dγ_d`.
pub fn first_absolute_moment(dim: usize) -> Result<f64> {
    radial_expectation(dim, |r| r)
}

/// `M_2 = ∫ exp((1 + |y|)² / 4) dγ_d`.
pub fn m2_constant(dim: usize) -> Result<f64> {
    radial_expectation(dim, |r| (0.25 * (1.0 + r) * (1.0 + r)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gh1() -> GaussianQuadrature {
        GaussianQuadrature::default_for(1).unwrap()
    }

    #[test]
    fn weights_sum_to_one() {
        for q in [
            GaussianQuadrature::default_for(1).unwrap(),
            GaussianQuadrature::default_for(2).unwrap(),
            GaussianQuadrature::default_for(3).unwrap(),
            GaussianQuadrature::default_lattice(1).unwrap(),
            GaussianQuadrature::default_lattice(2).unwrap(),
        ] {
            assert!((pairwise_sum(q.weights()) - 1.0).abs() < 1e-12, "{q:?}");
        }
    }

    #[test]
    fn expectation_examples() {
        let q = gh1();
        assert_relative_eq!(q.expect(|_| 1.0).unwrap(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(q.expect(|y| y[0] * y[0]).unwrap(), 1.0, epsilon = 1e-13);
        let m1 = first_absolute_moment(1).unwrap();
        assert_relative_eq!(m1, (2.0 / std::f64::consts::PI).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn two_dimensional_monomials() {
        let q = GaussianQuadrature::default_for(2).unwrap();
        // E[x^4 y^6] = 3 * 15
        let v = q.expect(|y| y[0].powi(4) * y[1].powi(6)).unwrap();
        assert_relative_eq!(v, 45.0, max_relative = 1e-12);
    }

    #[test]
    fn non_finite_integrand_reports_node() {
        let q = gh1();
        let err = q.expect(|y| if y[0] > 3.0 { f64::NAN } else { 0.0 }).unwrap_err();
        match err {
            Error::NonFinite { point, .. } => assert!(point[0] > 3.0),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn divergence_examples() {
        let lin = VectorFieldHandle::new(1, |x, o| o[0] = x[0]).with_jacobian(|_, j| j[0] = 1.0);
        assert_relative_eq!(gauss_divergence(&lin, &[1.7]).unwrap(), 1.7 * 1.7 - 1.0);
        let rot = VectorFieldHandle::new(2, |x, o| {
            o[0] = x[1];
            o[1] = -x[0];
        });
        assert!(gauss_divergence(&rot, &[0.3, -1.1]).unwrap().abs() < 1e-9);
        let cst = VectorFieldHandle::new(1, |_, o| o[0] = 1.0);
        assert_relative_eq!(gauss_divergence(&cst, &[-0.4]).unwrap(), -0.4, epsilon = 1e-10);
    }

    #[test]
    fn divergence_without_derivatives_is_capability_error() {
        let f = VectorFieldHandle::new(1, |x, o| o[0] = x[0]).without_finite_differences();
        assert!(matches!(gauss_divergence(&f, &[0.0]), Err(Error::MissingDerivative(_))));
    }

    #[test]
    fn matrix_divergence_examples() {
        let id = MatrixFieldHandle::new(2, 2, |_, o| {
            o.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        });
        let v = matrix_divergence(&id, &[0.5, -2.0]).unwrap();
        assert_relative_eq!(v[0], 0.5, epsilon = 1e-10);
        assert_relative_eq!(v[1], -2.0, epsilon = 1e-10);
        let lin = MatrixFieldHandle::new(1, 1, |x, o| o[0] = x[0]);
        assert_relative_eq!(matrix_divergence(&lin, &[2.0]).unwrap()[0], 3.0, epsilon = 1e-9);
        let col = MatrixFieldHandle::new(2, 1, |x, o| {
            o[0] = x[1];
            o[1] = -x[0];
        });
        assert!(matrix_divergence(&col, &[1.0, 2.0]).unwrap()[0].abs() < 1e-9);
    }

    #[test]
    fn jacobian_mismatch_small_for_correct_jacobian() {
        let f = VectorFieldHandle::new(2, |x, o| {
            o[0] = x[0].sin() * x[1];
            o[1] = x[0] * x[0];
        })
        .with_jacobian(|x, j| {
            j[0] = x[0].cos() * x[1];
            j[1] = x[0].sin();
            j[2] = 2.0 * x[0];
            j[3] = 0.0;
        });
        let pts = vec![vec![0.1, 0.2], vec![-1.5, 3.0], vec![10.0, -4.0]];
        assert!(f.jacobian_mismatch(&pts).unwrap() < 1e-5);
    }

    #[test]
    fn ou_smoothing_examples() {
        let q = gh1();
        let eps = 0.3;
        let v = ou_smooth_scalar(|z| z[0], eps, &[1.3], &q).unwrap();
        assert_relative_eq!(v, (-eps).exp() * 1.3, epsilon = 1e-13);
        let c = ou_smooth_scalar(|_| 4.2, eps, &[9.0], &q).unwrap();
        assert_relative_eq!(c, 4.2, epsilon = 1e-13);
        let sq = ou_smooth_scalar(|z| z[0] * z[0], 2f64.ln(), &[2.0], &q).unwrap();
        assert_relative_eq!(sq, 1.75, epsilon = 1e-13);
    }

    #[test]
    fn lattice_smoothing_gradient_matches_value() {
        let q = GaussianQuadrature::default_lattice(1).unwrap();
        let f = |z: &[f64], o: &mut [f64]| o[0] = z[0].signum();
        let eps = 1.0 / 16.0;
        let x = [0.07];
        let mut v = [0.0];
        let mut j = [0.0];
        q.smooth(&f, 1, eps, &x, &mut v, Some(&mut j)).unwrap();
        let h = 1e-6;
        let mut vp = [0.0];
        let mut vm = [0.0];
        q.smooth(&f, 1, eps, &[x[0] + h], &mut vp, None).unwrap();
        q.smooth(&f, 1, eps, &[x[0] - h], &mut vm, None).unwrap();
        assert_relative_eq!(j[0], (vp[0] - vm[0]) / (2.0 * h), max_relative = 1e-6);
        let exact_s = (1.0 - (-2.0 * eps).exp()).sqrt();
        let exact = 2.0 * crate::rng::normal_cdf((-eps).exp() * x[0] / exact_s) - 1.0;
        assert!((v[0] - exact).abs() < 5e-3, "{} vs {}", v[0], exact);
    }

    #[test]
    fn lattice_sign_is_odd() {
        let q = GaussianQuadrature::default_lattice(1).unwrap();
        let v = ou_smooth_scalar(|z| z[0].signum(), 0.25, &[0.0], &q).unwrap();
        assert!(v.abs() < 1e-14);
    }

    #[test]
    fn hermite_smoothing_gradient_matches_value() {
        let q = GaussianQuadrature::default_for(2).unwrap();
        let f = |z: &[f64], o: &mut [f64]| {
            o[0] = (z[0] * z[1]).sin();
            o[1] = z[0] * z[0] * z[1];
        };
        let x = [0.4, -0.9];
        let eps = 0.5;
        let mut v = [0.0; 2];
        let mut j = [0.0; 4];
        q.smooth(&f, 2, eps, &x, &mut v, Some(&mut j)).unwrap();
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += 1e-6;
            xm[k] -= 1e-6;
            let vp = ou_smooth(&f, 2, eps, &xp, &q).unwrap();
            let vm = ou_smooth(&f, 2, eps, &xm, &q).unwrap();
            for r in 0..2 {
                let fd = (vp[r] - vm[r]) / 2e-6;
                assert!((j[r * 2 + k] - fd).abs() < 1e-6, "{r}{k}: {} vs {fd}", j[r * 2 + k]);
            }
        }
    }

    #[test]
    fn log_expect_flags_divergence() {
        let q = gh1();
        let ok = q.log_expect(|y| 0.25 * y[0] * y[0]).unwrap();
        assert_relative_eq!(ok.value(), 2f64.sqrt(), max_relative = 1e-8);
        assert!(ok.check("ok", 700.0, 1e-2).is_ok());
        let bad = q.log_expect(|y| 0.6 * y[0] * y[0]).unwrap();
        assert!(bad.check("bad", 700.0, 1e-2).is_err());
    }

    #[test]
    fn m2_matches_closed_form() {
        // 2√2 e^{1/2} Φ(1/√2)
        let closed = 2.0 * 2f64.sqrt() * 0.5f64.exp() * crate::rng::normal_cdf(0.5f64.sqrt());
        assert_relative_eq!(m2_constant(1).unwrap(), closed, max_relative = 1e-11);
    }
}
