//! The flow density `K̃` along trajectories and the estimators built on it.

use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientField, PointEval, LOG_CAP, TAIL_TOL};
use crate::error::{Error, Result};
use crate::gaussian::{divergence_from_parts, fd_step, GaussianQuadrature};
use crate::sde::{
    run_ensemble, BrownianPath, EnsembleSpec, FlowEnsemble, PathObserver, PathRecorder, StepView, Trajectory,
};
use crate::stats::{log_sum_exp, Estimate};

/// Accumulated terms of `log K̃ = −S − D` for one trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DensityRecord {
    /// `S = Σ ⟨δ(σ)(X_k), Δw_k⟩`.
    pub stochastic: f64,
    /// `D = Σ Φ(X_k) dt`.
    pub drift: f64,
    pub log_k_tilde: f64,
}

impl DensityRecord {
    fn from_sums(stochastic: f64, drift: f64) -> Self {
        DensityRecord {
            stochastic,
            drift,
            log_k_tilde: -stochastic - drift,
        }
    }
}

/// `log K` at the endpoint `X_{s,t}(x)`, i.e. `−log K̃(x)`.
pub fn pushforward_log_k(record: &DensityRecord) -> f64 {
    -record.log_k_tilde
}

fn frob_pair(a: &[f64], d: usize) -> f64 {
    // tr(J J) = Σ_{ik} J[i][k] J[k][i]
    let mut acc = 0.0;
    for i in 0..d {
        for k in 0..d {
            acc += a[i * d + k] * a[k * d + i];
        }
    }
    acc
}

/// Fills `ds` with `δ(σ)(x)` and returns `Φ(x)`.
fn phi_parts(x: &[f64], e: &PointEval, ds: &mut [f64]) -> f64 {
    let (d, m) = (e.dim(), e.noise_dim());
    for (j, out) in ds.iter_mut().enumerate() {
        let jac = &e.sigma_jac[j * d * d..(j + 1) * d * d];
        let mut acc = 0.0;
        for i in 0..d {
            acc += e.sigma[i * m + j] * x[i] - jac[i * d + i];
        }
        *out = acc;
    }
    let db = divergence_from_parts(x, &e.drift, &e.drift_jac);
    let hs: f64 = e.sigma.iter().map(|v| v * v).sum();
    let pair: f64 = (0..m)
        .map(|j| frob_pair(&e.sigma_jac[j * d * d..(j + 1) * d * d], d))
        .sum();
    db + 0.5 * hs + 0.5 * pair
}

/// `Φ_t(x) = δ(b_t) + ½‖σ_t‖²_HS + ½ Σ_j tr(J_j J_j)` with `J_j = ∇σ_t^{·j}`.
pub fn phi_integrand(field: &CoefficientField, t: f64, x: &[f64]) -> Result<f64> {
    let mut e = field.workspace();
    field.evaluate(t, x, &mut e, true)?;
    let mut ds = vec![0.0; field.noise_dim()];
    Ok(phi_parts(x, &e, &mut ds))
}

/// Itô accumulator: left-point `δ(σ)` and `Φ`.
#[derive(Debug, Clone)]
pub struct ItoDensity {
    ds: Vec<f64>,
    stochastic: f64,
    drift: f64,
}

impl ItoDensity {
    pub fn new(noise_dim: usize) -> Self {
        ItoDensity {
            ds: vec![0.0; noise_dim],
            stochastic: 0.0,
            drift: 0.0,
        }
    }

    pub fn record(&self) -> DensityRecord {
        DensityRecord::from_sums(self.stochastic, self.drift)
    }
}

impl PathObserver for ItoDensity {
    fn needs_derivatives(&self) -> bool {
        true
    }

    fn start(&mut self, _t: f64, _x: &[f64]) {
        self.stochastic = 0.0;
        self.drift = 0.0;
    }

    fn step(&mut self, st: &StepView<'_>) -> Result<()> {
        let phi = phi_parts(st.x, st.eval, &mut self.ds);
        let inc: f64 = self.ds.iter().zip(st.dw).map(|(a, b)| a * b).sum();
        if !inc.is_finite() || !phi.is_finite() {
            return Err(Error::non_finite("density integrand", st.x));
        }
        self.stochastic += inc;
        self.drift += phi * st.dt;
        Ok(())
    }
}

/// Stratonovich accumulator: `δ(σ)` at the spatial midpoint of each step
/// and `δ(b̃)` with `b̃ = b − ½ Σ_j (∇σ^{·j}) σ^{·j}`.
pub struct StratonovichDensity {
    field: CoefficientField,
    ws: PointEval,
    mid: Vec<f64>,
    ds: Vec<f64>,
    stochastic: f64,
    drift: f64,
}

impl StratonovichDensity {
    pub fn new(field: &CoefficientField) -> Self {
        StratonovichDensity {
            field: field.clone(),
            ws: field.workspace(),
            mid: vec![0.0; field.dim()],
            ds: vec![0.0; field.noise_dim()],
            stochastic: 0.0,
            drift: 0.0,
        }
    }

    pub fn record(&self) -> DensityRecord {
        DensityRecord::from_sums(self.stochastic, self.drift)
    }
}

/// `c = Σ_j J_j σ^{·j}` from an evaluation with derivatives.
fn correction(e: &PointEval, out: &mut [f64]) {
    let (d, m) = (e.dim(), e.noise_dim());
    out.fill(0.0);
    for j in 0..m {
        let jac = &e.sigma_jac[j * d * d..(j + 1) * d * d];
        for i in 0..d {
            for k in 0..d {
                out[i] += jac[i * d + k] * e.sigma[k * m + j];
            }
        }
    }
}

fn corrected_drift_divergence(field: &CoefficientField, t: f64, x: &[f64], e: &mut PointEval) -> Result<f64> {
    let d = field.dim();
    field.evaluate(t, x, e, true)?;
    let db = divergence_from_parts(x, &e.drift, &e.drift_jac);
    let mut c = vec![0.0; d];
    correction(e, &mut c);
    let cx: f64 = c.iter().zip(x).map(|(a, b)| a * b).sum();
    let h = fd_step(x);
    let mut xp = x.to_vec();
    let (mut cp, mut cm) = (vec![0.0; d], vec![0.0; d]);
    let mut div_c = 0.0;
    for k in 0..d {
        xp[k] = x[k] + h;
        field.evaluate(t, &xp, e, true)?;
        correction(e, &mut cp);
        xp[k] = x[k] - h;
        field.evaluate(t, &xp, e, true)?;
        correction(e, &mut cm);
        xp[k] = x[k];
        div_c += (cp[k] - cm[k]) / (2.0 * h);
    }
    Ok(db - 0.5 * cx + 0.5 * div_c)
}

impl PathObserver for StratonovichDensity {
    fn start(&mut self, _t: f64, _x: &[f64]) {
        self.stochastic = 0.0;
        self.drift = 0.0;
    }

    fn step(&mut self, st: &StepView<'_>) -> Result<()> {
        let m = self.ds.len();
        for ((c, a), b) in self.mid.iter_mut().zip(st.x).zip(st.next) {
            *c = 0.5 * (a + b);
        }
        self.field.evaluate(st.t, &self.mid, &mut self.ws, true)?;
        let d = self.mid.len();
        for j in 0..m {
            let jac = &self.ws.sigma_jac[j * d * d..(j + 1) * d * d];
            let mut acc = 0.0;
            for i in 0..d {
                acc += self.ws.sigma[i * m + j] * self.mid[i] - jac[i * d + i];
            }
            self.ds[j] = acc;
        }
        let inc: f64 = self.ds.iter().zip(st.dw).map(|(a, b)| a * b).sum();
        let db = corrected_drift_divergence(&self.field, st.t, st.x, &mut self.ws)?;
        if !inc.is_finite() || !db.is_finite() {
            return Err(Error::non_finite("Stratonovich density integrand", st.x));
        }
        self.stochastic += inc;
        self.drift += db * st.dt;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityForm {
    Ito,
    Stratonovich,
}

fn check_shared_grid(trajectory: &Trajectory, path: &BrownianPath) -> Result<()> {
    if trajectory.grid != *path.grid() {
        return Err(Error::invalid("trajectory and path grids differ"));
    }
    Ok(())
}

fn replay<O: PathObserver>(
    field: &CoefficientField,
    trajectory: &Trajectory,
    path: &BrownianPath,
    obs: &mut O,
) -> Result<()> {
    check_shared_grid(trajectory, path)?;
    let grid = trajectory.grid;
    let mut e = field.workspace();
    obs.start(grid.start, trajectory.state(0));
    for k in 0..grid.steps {
        let t = grid.time(k);
        let x = trajectory.state(k);
        field.evaluate(t, x, &mut e, obs.needs_derivatives())?;
        obs.step(&StepView {
            k,
            t,
            dt: grid.dt(),
            x,
            next: trajectory.state(k + 1),
            eval: &e,
            dw: path.increment(k),
        })?;
    }
    Ok(())
}

/// Simulate from `x0` on `path` and return the Itô-form record.
pub fn density_record(
    field: &CoefficientField,
    x0: &[f64],
    path: &BrownianPath,
    trajectory: usize,
) -> Result<DensityRecord> {
    let mut acc = ItoDensity::new(field.noise_dim());
    crate::sde::run_path(field, x0, path, trajectory, &mut acc)?;
    Ok(acc.record())
}

/// Itô-form `log K̃` along a stored trajectory.
pub fn log_density_along(
    field: &CoefficientField,
    trajectory: &Trajectory,
    path: &BrownianPath,
) -> Result<DensityRecord> {
    let mut acc = ItoDensity::new(field.noise_dim());
    replay(field, trajectory, path, &mut acc)?;
    Ok(acc.record())
}

/// Stratonovich-form `log K̃` along a stored trajectory.
pub fn log_density_stratonovich(
    field: &CoefficientField,
    trajectory: &Trajectory,
    path: &BrownianPath,
) -> Result<DensityRecord> {
    let mut acc = StratonovichDensity::new(field);
    replay(field, trajectory, path, &mut acc)?;
    Ok(acc.record())
}

enum Acc {
    Ito(ItoDensity),
    Strat(Box<StratonovichDensity>),
}

impl Acc {
    fn record(&self) -> DensityRecord {
        match self {
            Acc::Ito(a) => a.record(),
            Acc::Strat(a) => a.record(),
        }
    }
}

impl PathObserver for Acc {
    fn needs_derivatives(&self) -> bool {
        matches!(self, Acc::Ito(_))
    }

    fn start(&mut self, t: f64, x: &[f64]) {
        match self {
            Acc::Ito(a) => a.start(t, x),
            Acc::Strat(a) => a.start(t, x),
        }
    }

    fn step(&mut self, st: &StepView<'_>) -> Result<()> {
        match self {
            Acc::Ito(a) => a.step(st),
            Acc::Strat(a) => a.step(st),
        }
    }
}

/// Simulate `spec` and accumulate a density record per trajectory.
pub fn simulate_density_ensemble(
    field: &CoefficientField,
    spec: &EnsembleSpec,
    form: DensityForm,
    store_paths: bool,
) -> Result<FlowEnsemble> {
    let grid = spec.grid()?;
    let make = |_| match form {
        DensityForm::Ito => Acc::Ito(ItoDensity::new(field.noise_dim())),
        DensityForm::Stratonovich => Acc::Strat(Box::new(StratonovichDensity::new(field))),
    };
    let d = field.dim();
    let mut finals;
    let mut records;
    let mut paths = None;
    if store_paths {
        let (layout, runs) = run_ensemble(field, spec, |i| (PathRecorder::default(), make(i)))?;
        finals = Vec::with_capacity(runs.len() * d);
        records = Vec::with_capacity(runs.len());
        let mut p = Vec::with_capacity(runs.len() * (grid.steps + 1) * d);
        for (x, (rec, acc)) in runs {
            finals.extend(x);
            p.extend(rec.states);
            records.push(acc.record());
        }
        paths = Some(p);
        return Ok(FlowEnsemble {
            layout,
            grid,
            finals,
            paths,
            records: Some(records),
        });
    }
    let (layout, runs) = run_ensemble(field, spec, make)?;
    finals = Vec::with_capacity(runs.len() * d);
    records = Vec::with_capacity(runs.len());
    for (x, acc) in runs {
        finals.extend(x);
        records.push(acc.record());
    }
    Ok(FlowEnsemble {
        layout,
        grid,
        finals,
        paths,
        records: Some(records),
    })
}

fn records(ens: &FlowEnsemble) -> Result<&[DensityRecord]> {
    let r = ens
        .records
        .as_deref()
        .ok_or_else(|| Error::invalid("ensemble carries no density records"))?;
    if r.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    Ok(r)
}

/// `‖K_{s,t}‖_{L^p(P×γ_d)} = (∫ E K̃^{1−p} dγ_d)^{1/p}`, averaged in log
/// space; the error bar is the delta-method image of the batch error.
pub fn lp_norm_estimate(ens: &FlowEnsemble, p: f64) -> Result<Estimate> {
    if !(p > 1.0) {
        return Err(Error::invalid(format!("p must exceed 1, got {p}")));
    }
    let logs: Vec<f64> = records(ens)?.iter().map(|r| (1.0 - p) * r.log_k_tilde).collect();
    let est = ens.layout.log_estimate(&logs);
    let value = (est.log_mean / p).exp();
    Ok(Estimate {
        mean: value,
        stderr: value * est.rel_stderr / p,
        samples: est.samples,
    })
}

/// `∫ E(K |log K|) dγ_d`, estimated as the weighted mean of `|log K̃|`.
pub fn entropy_estimate(ens: &FlowEnsemble) -> Result<Estimate> {
    let v: Vec<f64> = records(ens)?.iter().map(|r| r.log_k_tilde.abs()).collect();
    Ok(ens.layout.estimate(&v))
}

/// `∫ E K̃ dγ_d`, which is 1.
pub fn mass_estimate(ens: &FlowEnsemble) -> Result<Estimate> {
    let logs: Vec<f64> = records(ens)?.iter().map(|r| r.log_k_tilde).collect();
    let est = ens.layout.log_estimate(&logs);
    Ok(Estimate {
        mean: est.mean(),
        stderr: est.stderr(),
        samples: est.samples,
    })
}

/// Trapezoidal `∫ w(u) du` weights, checked to cover `[s, t]`.
pub(crate) fn time_weights(tgrid: &[f64], s: f64, t: f64) -> Result<Vec<f64>> {
    crate::coefficients::check_tgrid(tgrid)?;
    let tol = 1e-12 * (1.0 + t.abs());
    if (tgrid[0] - s).abs() > tol || (tgrid[tgrid.len() - 1] - t).abs() > tol {
        return Err(Error::invalid("time grid must run from s to t"));
    }
    Ok(crate::coefficients::trapezoid_weights(tgrid))
}

/// Right-hand side of the `L^p` density bound,
/// `[(t−s)⁻¹ ∫ₛᵗ ∫ exp(p(t−s)[2|δb| + ‖σ‖² + ‖∇σ‖² + 2(p−1)|δσ|²]) dγ du]^{(p−1)/(p(2p−1))}`,
/// accumulated in log space. Divergent integrals are reported as errors.
pub fn theorem_bound_rhs(
    field: &CoefficientField,
    s: f64,
    t: f64,
    p: f64,
    quad: &GaussianQuadrature,
    tgrid: &[f64],
) -> Result<f64> {
    if !(p > 1.0) {
        return Err(Error::invalid(format!("p must exceed 1, got {p}")));
    }
    if !(t >= s) {
        return Err(Error::invalid("bound needs s ≤ t"));
    }
    if t == s {
        return Ok(1.0);
    }
    let log_mean = log_bound_integral(field, s, t, p, quad, tgrid)?;
    Ok(((p - 1.0) / (p * (2.0 * p - 1.0)) * log_mean).exp())
}

fn log_bound_integral(
    field: &CoefficientField,
    s: f64,
    t: f64,
    p: f64,
    quad: &GaussianQuadrature,
    tgrid: &[f64],
) -> Result<f64> {
    if quad.dim() != field.dim() {
        return Err(Error::invalid("quadrature dimension does not match the field"));
    }
    let tau = t - s;
    let weights = time_weights(tgrid, s, t)?;
    let m = field.noise_dim();
    let mut terms = Vec::with_capacity(tgrid.len());
    for (&u, &w) in tgrid.iter().zip(&weights) {
        let li = quad.log_expect(|y| {
            let mut e = field.workspace();
            if field.evaluate(u, y, &mut e, true).is_err() {
                return f64::NAN;
            }
            let mut ds = vec![0.0; m];
            phi_parts(y, &e, &mut ds);
            let db = divergence_from_parts(y, &e.drift, &e.drift_jac);
            let hs: f64 = e.sigma.iter().map(|v| v * v).sum();
            let grad: f64 = e.sigma_jac.iter().map(|v| v * v).sum();
            let dsq: f64 = ds.iter().map(|v| v * v).sum();
            p * tau * (2.0 * db.abs() + hs + grad + 2.0 * (p - 1.0) * dsq)
        })?;
        let li = li.check("density bound integral", LOG_CAP, TAIL_TOL)?;
        terms.push(w.ln() + li.log_value);
    }
    Ok(log_sum_exp(&terms) - tau.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{builtin_coefficients, CustomField, FieldParams, ParamValue};
    use crate::quadrature::linspace;
    use crate::sde::{sample_brownian, simulate, TimeGrid};
    use approx::assert_relative_eq;

    fn catalog(name: &str, d: usize) -> CoefficientField {
        builtin_coefficients(name, d, &FieldParams::new()).unwrap()
    }

    fn wavy() -> CoefficientField {
        let meta = catalog("translate", 1).meta().clone();
        CustomField::new(meta, |_, x, o| o[0] = 2.0 + x[0].sin(), |_, _, o| o[0] = 0.0)
            .sigma_jacobian(|_, x, o| o[0] = x[0].cos())
            .build()
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi_integrand(&catalog("translate", 2), 0.0, &[0.3, -1.0]).unwrap(), 1.0);
        let x = 0.7;
        assert_relative_eq!(
            phi_integrand(&catalog("ou_linear", 1), 0.0, &[x]).unwrap(),
            1.0 - x * x + 0.5,
            epsilon = 1e-14
        );
        let v = phi_integrand(&wavy(), 0.0, &[x]).unwrap();
        let s = 2.0 + x.sin();
        assert_relative_eq!(v, 0.5 * s * s + 0.5 * x.cos() * x.cos(), epsilon = 1e-14);
    }

    #[test]
    fn empty_horizon_has_unit_density() {
        let f = catalog("translate", 1);
        let g = TimeGrid::new(0.5, 0.5, 0.1).unwrap();
        let p = sample_brownian(g, 1, 0, 0);
        let tr = simulate(&f, &[0.2], &p).unwrap();
        let r = log_density_along(&f, &tr, &p).unwrap();
        assert_eq!(r.log_k_tilde, 0.0);
        assert_eq!(pushforward_log_k(&r), 0.0);
    }

    #[test]
    fn translate_ito_sum_identity() {
        let f = catalog("translate", 1);
        let g = TimeGrid::new(0.0, 0.25, 1e-3).unwrap();
        let p = sample_brownian(g, 1, 7, 3);
        let x = 0.4;
        let tr = simulate(&f, &[x], &p).unwrap();
        let r = log_density_along(&f, &tr, &p).unwrap();
        let w = p.total()[0];
        let qv: f64 = p.increments().iter().map(|v| v * v).sum();
        assert_relative_eq!(
            pushforward_log_k(&r),
            x * w + 0.5 * w * w + 0.5 * (0.25 - qv),
            epsilon = 1e-12
        );
        let st = log_density_stratonovich(&f, &tr, &p).unwrap();
        assert_relative_eq!(pushforward_log_k(&st), x * w + 0.5 * w * w, epsilon = 1e-12);
    }

    #[test]
    fn forms_agree_better_on_finer_grid() {
        let f = wavy();
        let mut gaps = Vec::new();
        for dt in [4e-3, 1e-3] {
            let g = TimeGrid::new(0.0, 0.2, dt).unwrap();
            let mut total = 0.0;
            for idx in 0..20 {
                let p = sample_brownian(g, 1, 11, idx);
                let tr = simulate(&f, &[0.3], &p).unwrap();
                let a = log_density_along(&f, &tr, &p).unwrap();
                let b = log_density_stratonovich(&f, &tr, &p).unwrap();
                total += (a.log_k_tilde - b.log_k_tilde).abs();
            }
            gaps.push(total / 20.0);
        }
        assert!(gaps[1] < gaps[0], "{gaps:?}");
    }

    #[test]
    fn bound_rhs_translate_example() {
        let f = catalog("translate", 1);
        let q = GaussianQuadrature::gauss_hermite(1, 64).unwrap();
        let v = theorem_bound_rhs(&f, 0.0, 0.1, 2.0, &q, &[0.0, 0.1]).unwrap();
        let oracle = (0.2f64.exp() * 0.2f64.powf(-0.5)).powf(1.0 / 6.0);
        assert_relative_eq!(v, oracle, max_relative = 1e-12);
        assert_relative_eq!(v, 1.1823, epsilon = 1e-4);
        assert_eq!(theorem_bound_rhs(&f, 0.3, 0.3, 2.0, &q, &[0.3]).unwrap(), 1.0);
        let near_one = theorem_bound_rhs(&f, 0.0, 0.1, 1.0 + 1e-9, &q, &linspace(0.0, 0.1, 3)).unwrap();
        assert_relative_eq!(near_one, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn bound_rhs_flags_divergence() {
        let f = catalog("translate", 1);
        let q = GaussianQuadrature::gauss_hermite(1, 64).unwrap();
        // x² coefficient p(t−s)·2(p−1) = 3 exceeds 1/2.
        match theorem_bound_rhs(&f, 0.0, 0.25, 3.0, &q, &[0.0, 0.25]) {
            Err(Error::Divergent { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn ou_lambda_param_does_not_touch_phi() {
        let mut p = FieldParams::new();
        p.insert("lambda".into(), ParamValue::Scalar(0.1));
        let f = builtin_coefficients("ou_linear", 1, &p).unwrap();
        assert_relative_eq!(phi_integrand(&f, 0.0, &[0.0]).unwrap(), 1.5);
    }
}
