//! Occupation functionals, stochastic-integral convergence and coupling of
//! regularized flows.

use serde::{Deserialize, Serialize};

use crate::coefficients::{regularize_drift, CoefficientField, RegularizationLevel};
use crate::error::{Error, Result};
use crate::gaussian::GaussianQuadrature;
use crate::quadrature::composite_legendre;
use crate::sde::{
    map_ensemble, run_path, sample_brownian, EnsembleSpec, PathObserver, PathRecorder, StepView, TimeGrid,
};
use crate::stats::{batch_estimate, pairwise_sum, Estimate};

/// Space-time box `[t0, t1] × Π [lo_i, hi_i]` carrying the support of `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportBox {
    pub t0: f64,
    pub t1: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SupportBox {
    fn volume(&self) -> f64 {
        (self.t1 - self.t0) * self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product::<f64>()
    }
}

/// `E ∫ₛᵀ e^{−λt} f(t, X_{s,t}(x)) dt`, `‖f‖_{L^{d+1}}` and their ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KrylovResult {
    pub functional: Estimate,
    pub norm: f64,
    pub ratio: f64,
    pub ratio_stderr: f64,
}

type SpaceTimeFn<'a> = &'a (dyn Fn(f64, &[f64]) -> f64 + Sync);

struct Occupation<'a> {
    f: SpaceTimeFn<'a>,
    lambda: f64,
    acc: f64,
}

impl PathObserver for Occupation<'_> {
    fn step(&mut self, st: &StepView<'_>) -> Result<()> {
        let v = (self.f)(st.t, st.x);
        if !(v >= 0.0) {
            return Err(Error::invalid("Krylov functional needs a non-negative f"));
        }
        self.acc += (-self.lambda * st.t).exp() * v * st.dt;
        Ok(())
    }
}

/// `(∫∫ f^{d+1} dx dt)^{1/(d+1)}` by composite Gauss–Legendre on the box.
pub fn space_time_norm(f: SpaceTimeFn<'_>, support: &SupportBox, panels: usize) -> Result<f64> {
    let d = support.lo.len();
    if d == 0 || d > 2 || support.hi.len() != d || !(support.volume() > 0.0) {
        return Err(Error::Config("support box must be non-degenerate with d ≤ 2".into()));
    }
    let q = (d + 1) as f64;
    let (tn, tw) = composite_legendre(support.t0, support.t1, panels, 4);
    let axes: Vec<(Vec<f64>, Vec<f64>)> = (0..d)
        .map(|i| composite_legendre(support.lo[i], support.hi[i], panels, 4))
        .collect();
    let mut terms = Vec::new();
    for (t, wt) in tn.iter().zip(&tw) {
        if d == 1 {
            for (x, wx) in axes[0].0.iter().zip(&axes[0].1) {
                terms.push(wt * wx * f(*t, &[*x]).powf(q));
            }
        } else {
            for (x, wx) in axes[0].0.iter().zip(&axes[0].1) {
                for (y, wy) in axes[1].0.iter().zip(&axes[1].1) {
                    terms.push(wt * wx * wy * f(*t, &[*x, *y]).powf(q));
                }
            }
        }
    }
    Ok(pairwise_sum(&terms).powf(1.0 / q))
}

/// Krylov functional from the ensemble start points of `spec`, normalised
/// by `‖f‖_{L^{d+1}}` over `support`, outside of which `f` must vanish.
pub fn krylov_ratio(
    field: &CoefficientField,
    f: SpaceTimeFn<'_>,
    support: Option<&SupportBox>,
    lambda: f64,
    spec: &EnsembleSpec,
) -> Result<KrylovResult> {
    let support = support.ok_or_else(|| Error::Config("f needs a declared support box".into()))?;
    if support.lo.len() != field.dim() {
        return Err(Error::Config("support box dimension differs from the field".into()));
    }
    let norm = space_time_norm(f, support, 64)?;
    let (layout, values) = map_ensemble(field, spec, |traj, x0, path| {
        let mut occ = Occupation { f, lambda, acc: 0.0 };
        run_path(field, x0, path, traj, &mut occ)?;
        Ok(occ.acc)
    })?;
    let functional = layout.estimate(&values);
    let (ratio, ratio_stderr) = if norm > 0.0 {
        (functional.mean / norm, functional.stderr / norm)
    } else {
        (0.0, 0.0)
    };
    Ok(KrylovResult {
        functional,
        norm,
        ratio,
        ratio_stderr,
    })
}

/// Integrand `η(t, w_t) ∈ R^m` of `I_t = ∫₀ᵗ ⟨η, dw⟩`.
pub type Integrand<'a> = &'a (dyn Fn(f64, &[f64], &mut [f64]) + Sync);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegralRow {
    pub level: usize,
    /// `E sup_{t≤T} |I^n_t − I_t|²`.
    pub deviation: Estimate,
    /// `E ∫₀ᵀ |η^n|^{2+α} dt`.
    pub moment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegralTable {
    pub rows: Vec<IntegralRow>,
    pub limit_moment: f64,
    pub limit_second_moment: Estimate,
    pub warning: Option<String>,
}

/// Left-point Itô sums of every integrand on a common path per sample,
/// compared with the limit integrand. A moment above `moment_cap` or a
/// non-finite moment attaches a warning.
pub fn integral_convergence(
    sequence: &[Integrand<'_>],
    limit: Integrand<'_>,
    grid: TimeGrid,
    noise_dim: usize,
    paths: usize,
    seed: u64,
    alpha: f64,
    moment_cap: f64,
) -> Result<IntegralTable> {
    if paths == 0 {
        return Err(Error::EmptyEnsemble);
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid("α must be positive"));
    }
    use rayon::prelude::*;
    let k = sequence.len();
    let per_path: Vec<(Vec<f64>, Vec<f64>, f64, f64)> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let p = sample_brownian(grid, noise_dim, seed, i as u64);
            let dt = grid.dt();
            let mut w = vec![0.0; noise_dim];
            let mut eta = vec![0.0; noise_dim];
            let mut ints = vec![0.0; k];
            let mut lim = 0.0;
            let mut sup = vec![0.0f64; k];
            let mut moments = vec![0.0; k];
            let mut lim_moment = 0.0;
            let norm_pow = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().powf(0.5 * (2.0 + alpha));
            for step in 0..grid.steps {
                let t = grid.time(step);
                let dw = p.increment(step);
                limit(t, &w, &mut eta);
                lim += eta.iter().zip(dw).map(|(a, b)| a * b).sum::<f64>();
                lim_moment += norm_pow(&eta) * dt;
                for (n, f) in sequence.iter().enumerate() {
                    f(t, &w, &mut eta);
                    ints[n] += eta.iter().zip(dw).map(|(a, b)| a * b).sum::<f64>();
                    moments[n] += norm_pow(&eta) * dt;
                }
                for (n, v) in ints.iter().enumerate() {
                    sup[n] = sup[n].max((v - lim).abs());
                }
                for (wj, d) in w.iter_mut().zip(dw) {
                    *wj += d;
                }
            }
            (sup.iter().map(|s| s * s).collect(), moments, lim_moment, lim * lim)
        })
        .collect();
    let mut rows = Vec::with_capacity(k);
    let mut warning = None;
    for n in 0..k {
        let dev: Vec<f64> = per_path.iter().map(|r| r.0[n]).collect();
        let mom: Vec<f64> = per_path.iter().map(|r| r.1[n]).collect();
        let moment = pairwise_sum(&mom) / paths as f64;
        if !(moment <= moment_cap) {
            warning = Some(format!("integrand {n} has 2+α moment {moment:e} above {moment_cap:e}"));
        }
        rows.push(IntegralRow {
            level: n,
            deviation: batch_estimate(&dev),
            moment,
        });
    }
    let lm: Vec<f64> = per_path.iter().map(|r| r.2).collect();
    let sq: Vec<f64> = per_path.iter().map(|r| r.3).collect();
    Ok(IntegralTable {
        rows,
        limit_moment: pairwise_sum(&lm) / paths as f64,
        limit_second_moment: batch_estimate(&sq),
        warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingRow {
    pub n: u32,
    /// `E sup_t |X^n_t − X^{n_ref}_t|`.
    pub deviation: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingTable {
    pub n_ref: u32,
    pub rows: Vec<CouplingRow>,
    /// Number of consecutive levels where the deviation drops.
    pub decreases: usize,
    /// Last deviation over the first.
    pub final_ratio: f64,
}

impl CouplingTable {
    /// At least `steps − 1` of the consecutive steps decrease and the last
    /// level is at most a third of the first.
    pub fn converging(&self) -> bool {
        let steps = self.rows.len().saturating_sub(1);
        self.decreases + 1 >= steps && self.final_ratio <= 1.0 / 3.0
    }
}

/// Drift-regularized flows `X^n` for each level against `X^{n_ref}`, all on
/// the same Brownian path per trajectory.
pub fn coupling_convergence(
    field: &CoefficientField,
    levels: &[u32],
    n_ref: u32,
    spec: &EnsembleSpec,
) -> Result<CouplingTable> {
    let d = field.dim();
    let quad = if field.meta().measurable_drift {
        GaussianQuadrature::default_lattice(d)?
    } else {
        GaussianQuadrature::default_for(d)?
    };
    let reference = regularize_drift(field, RegularizationLevel::new(n_ref)?, &quad)?;
    let fields: Vec<Option<CoefficientField>> = levels
        .iter()
        .map(|&n| {
            if n == n_ref {
                Ok(None)
            } else {
                regularize_drift(field, RegularizationLevel::new(n)?, &quad).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let (layout, devs) = map_ensemble(field, spec, |traj, x0, path| {
        let mut rec = PathRecorder::default();
        run_path(&reference, x0, path, traj, &mut rec)?;
        let reference_states = rec.states;
        let mut out = Vec::with_capacity(fields.len());
        for f in &fields {
            match f {
                None => out.push(0.0),
                Some(f) => {
                    let mut r = PathRecorder::default();
                    run_path(f, x0, path, traj, &mut r)?;
                    let mut sup: f64 = 0.0;
                    for (a, b) in r.states.chunks(d).zip(reference_states.chunks(d)) {
                        let dist = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
                        sup = sup.max(dist);
                    }
                    out.push(sup);
                }
            }
        }
        Ok(out)
    })?;
    let rows: Vec<CouplingRow> = levels
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let v: Vec<f64> = devs.iter().map(|r| r[i]).collect();
            CouplingRow {
                n,
                deviation: layout.estimate(&v),
            }
        })
        .collect();
    let decreases = rows
        .windows(2)
        .filter(|w| w[1].deviation.mean < w[0].deviation.mean)
        .count();
    let final_ratio = match (rows.first(), rows.last()) {
        (Some(a), Some(b)) if a.deviation.mean > 0.0 => b.deviation.mean / a.deviation.mean,
        _ => 0.0,
    };
    Ok(CouplingTable {
        n_ref,
        rows,
        decreases,
        final_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{builtin_coefficients, FieldParams};
    use crate::sde::{InitialPoints, NoiseMode};
    use approx::assert_relative_eq;

    fn single(x: f64, t: f64, dt: f64, replicas: usize) -> EnsembleSpec {
        EnsembleSpec {
            s: 0.0,
            t,
            dt,
            initials: InitialPoints::single(vec![x]),
            replicas,
            noise: NoiseMode::Independent,
            seed: 17,
        }
    }

    fn slab(w: f64) -> SupportBox {
        SupportBox {
            t0: 0.0,
            t1: 1.0,
            lo: vec![0.5 - w / 2.0],
            hi: vec![0.5 + w / 2.0],
        }
    }

    #[test]
    fn zero_function_gives_zero_ratio() {
        let f = builtin_coefficients("translate", 1, &FieldParams::new()).unwrap();
        let zero = |_: f64, _: &[f64]| 0.0;
        let r = krylov_ratio(&f, &zero, Some(&slab(0.1)), 1.0, &single(0.5, 1.0, 0.01, 50)).unwrap();
        assert_eq!(r.functional.mean, 0.0);
        assert_eq!(r.ratio, 0.0);
    }

    #[test]
    fn missing_support_is_a_config_error() {
        let f = builtin_coefficients("translate", 1, &FieldParams::new()).unwrap();
        let one = |_: f64, _: &[f64]| 1.0;
        assert!(matches!(
            krylov_ratio(&f, &one, None, 1.0, &single(0.0, 1.0, 0.1, 4)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ratio_is_scale_invariant() {
        let f = builtin_coefficients("translate", 1, &FieldParams::new()).unwrap();
        let b = slab(0.1);
        let ind = |t: f64, x: &[f64]| {
            if (0.0..=1.0).contains(&t) && x[0] >= b.lo[0] && x[0] <= b.hi[0] {
                1.0
            } else {
                0.0
            }
        };
        let scaled = |t: f64, x: &[f64]| 7.0 * ind(t, x);
        let spec = single(0.5, 1.0, 0.01, 200);
        let r1 = krylov_ratio(&f, &ind, Some(&b), 1.0, &spec).unwrap();
        let r7 = krylov_ratio(&f, &scaled, Some(&b), 1.0, &spec).unwrap();
        assert_relative_eq!(r1.ratio, r7.ratio, max_relative = 1e-14);
        assert_relative_eq!(r1.norm, 0.1f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn identical_integrands_have_zero_deviation() {
        let eta = |_: f64, _: &[f64], o: &mut [f64]| o[0] = 1.0;
        let g = TimeGrid::new(0.0, 1.0, 0.01).unwrap();
        let t = integral_convergence(&[&eta], &eta, g, 1, 100, 0, 0.5, 1e6).unwrap();
        assert_eq!(t.rows[0].deviation.mean, 0.0);
        assert!(t.warning.is_none());
    }

    #[test]
    fn scaled_integrands_follow_inverse_square() {
        let eta = |_: f64, _: &[f64], o: &mut [f64]| o[0] = 2.0;
        let s2 = |_: f64, _: &[f64], o: &mut [f64]| o[0] = 2.0 * 1.5;
        let s4 = |_: f64, _: &[f64], o: &mut [f64]| o[0] = 2.0 * 1.25;
        let g = TimeGrid::new(0.0, 1.0, 0.01).unwrap();
        let t = integral_convergence(&[&s2, &s4], &eta, g, 1, 400, 1, 0.5, 1e6).unwrap();
        let ratio = t.rows[0].deviation.mean / t.rows[1].deviation.mean;
        // Exact per path: sup|I^n − I|² = (1/n)² sup|I|².
        assert_relative_eq!(ratio, 4.0, max_relative = 1e-10);
    }

    #[test]
    fn coupling_against_itself_is_zero() {
        let f = builtin_coefficients("sign_drift", 1, &FieldParams::new()).unwrap();
        let t = coupling_convergence(&f, &[4], 4, &single(0.0, 0.05, 0.01, 8)).unwrap();
        assert_eq!(t.rows[0].deviation.mean, 0.0);
    }

    #[test]
    fn coupling_translate_vanishes() {
        let f = builtin_coefficients("translate", 1, &FieldParams::new()).unwrap();
        let t = coupling_convergence(&f, &[2, 4], 8, &single(0.3, 0.1, 0.01, 8)).unwrap();
        assert!(t.rows.iter().all(|r| r.deviation.mean == 0.0));
    }
}
