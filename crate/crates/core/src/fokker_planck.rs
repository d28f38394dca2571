//! Finite-volume Fokker–Planck solver and Monte-Carlo counterparts.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientField;
use crate::error::{Error, Result};
use crate::quadrature::composite_legendre;
use crate::rng::normal_pdf;
use crate::sde::{map_ensemble, run_path, EnsembleLayout, EnsembleSpec};
use crate::stats::{pairwise_sum, Estimate};

/// `a = σσ*`, row-major `d × d`.
pub fn diffusion_matrix(field: &CoefficientField, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let s = field.sigma(t, x)?;
    Ok(diffusion_from_sigma(&s, field.dim(), field.noise_dim()))
}

fn diffusion_from_sigma(s: &[f64], d: usize, m: usize) -> Vec<f64> {
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = (0..m).map(|k| s[i * m + k] * s[j * m + k]).sum();
        }
    }
    a
}

/// Cell-centred density on `[−R, R]^d` with `n` cells of width `h` per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FPGrid {
    pub dim: usize,
    pub radius: f64,
    pub cells: usize,
    pub values: Vec<f64>,
}

impl FPGrid {
    /// Zero density; `2R/h` must be an integer.
    pub fn new(dim: usize, radius: f64, h: f64) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::invalid("the PDE side supports d ≤ 2"));
        }
        if !(radius > 0.0) || !(h > 0.0) {
            return Err(Error::invalid("radius and spacing must be positive"));
        }
        let cells = (2.0 * radius / h).round() as usize;
        if cells < 3 || ((cells as f64) * h - 2.0 * radius).abs() > 1e-9 * radius {
            return Err(Error::invalid(format!(
                "spacing {h} does not divide [−{radius}, {radius}]"
            )));
        }
        Ok(FPGrid {
            dim,
            radius,
            cells,
            values: vec![0.0; cells.pow(dim as u32)],
        })
    }

    /// Cell averages of `density` by 4-point Gauss–Legendre per axis,
    /// rescaled to unit grid mass.
    pub fn from_density(dim: usize, radius: f64, h: f64, density: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut g = FPGrid::new(dim, radius, h)?;
        let (gx, gw) = composite_legendre(-0.5, 0.5, 1, 4);
        let mut x = vec![0.0; dim];
        for idx in 0..g.values.len() {
            let c = g.centre(idx);
            let mut acc = 0.0;
            if dim == 1 {
                for (u, w) in gx.iter().zip(&gw) {
                    x[0] = c[0] + u * h;
                    acc += w * density(&x);
                }
            } else {
                for (u, wu) in gx.iter().zip(&gw) {
                    for (v, wv) in gx.iter().zip(&gw) {
                        x[0] = c[0] + u * h;
                        x[1] = c[1] + v * h;
                        acc += wu * wv * density(&x);
                    }
                }
            }
            if !(acc >= 0.0) || !acc.is_finite() {
                return Err(Error::invalid("initial density must be finite and non-negative"));
            }
            g.values[idx] = acc;
        }
        let mass = g.mass();
        if !(mass > 0.0) {
            return Err(Error::invalid("initial density has no mass on the grid"));
        }
        g.values.iter_mut().for_each(|v| *v /= mass);
        Ok(g)
    }

    /// Standard Gaussian density on the grid.
    pub fn gaussian(dim: usize, radius: f64, h: f64) -> Result<Self> {
        Self::from_density(dim, radius, h, |x| x.iter().map(|v| normal_pdf(*v)).product())
    }

    pub fn h(&self) -> f64 {
        2.0 * self.radius / self.cells as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.dim as i32)
    }

    pub fn axis(&self) -> Vec<f64> {
        let h = self.h();
        (0..self.cells).map(|i| -self.radius + (i as f64 + 0.5) * h).collect()
    }

    pub fn centre(&self, idx: usize) -> Vec<f64> {
        let h = self.h();
        let n = self.cells;
        let c = |i: usize| -self.radius + (i as f64 + 0.5) * h;
        if self.dim == 1 {
            vec![c(idx)]
        } else {
            vec![c(idx / n), c(idx % n)]
        }
    }

    pub fn mass(&self) -> f64 {
        pairwise_sum(&self.values) * self.cell_volume()
    }

    /// `∫ φ u dx` by the midpoint rule.
    pub fn integrate(&self, phi: impl Fn(&[f64]) -> f64) -> f64 {
        let vol = self.cell_volume();
        let terms: Vec<f64> = (0..self.values.len())
            .map(|i| phi(&self.centre(i)) * self.values[i] * vol)
            .collect();
        pairwise_sum(&terms)
    }

    /// Mean and variance of the first coordinate.
    pub fn moments(&self) -> (f64, f64) {
        let mass = self.mass();
        let mean = self.integrate(|x| x[0]) / mass;
        let var = self.integrate(|x| (x[0] - mean) * (x[0] - mean)) / mass;
        (mean, var)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FPOptions {
    /// Explicit step; by default 0.9 of the stability bound, shrunk to
    /// divide the horizon.
    pub tau: Option<f64>,
    /// Largest total clipped negative mass tolerated.
    pub clip_tolerance: f64,
    /// Number of evenly spaced snapshots kept besides the endpoints.
    pub snapshots: usize,
}

impl Default for FPOptions {
    fn default() -> Self {
        FPOptions {
            tau: None,
            clip_tolerance: 1e-6,
            snapshots: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FPSolution {
    pub times: Vec<f64>,
    pub snapshots: Vec<FPGrid>,
    pub tau: f64,
    pub stability_bound: f64,
    pub steps: usize,
    /// Mass leaving through the boundary at each step.
    pub leakage: Vec<f64>,
    pub clipped: f64,
    /// `max_k |m_{k+1} − m_k + leak_k − clip_k|`.
    pub mass_audit: f64,
}

impl FPSolution {
    pub fn initial(&self) -> &FPGrid {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &FPGrid {
        self.snapshots.last().expect("at least the initial snapshot")
    }

    pub fn total_leakage(&self) -> f64 {
        pairwise_sum(&self.leakage)
    }

    /// Rows `t, x_1, …, x_d, u` for every snapshot.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let d = self.initial().dim;
        let head: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        writeln!(f, "t,{},u", head.join(","))?;
        for (t, g) in self.times.iter().zip(&self.snapshots) {
            for (i, u) in g.values.iter().enumerate() {
                let c: Vec<String> = g.centre(i).iter().map(|v| format!("{v:.16e}")).collect();
                writeln!(f, "{t:.16e},{},{u:.16e}", c.join(","))?;
            }
        }
        f.flush()?;
        Ok(())
    }
}

/// Cell-centre coefficients on the grid extended by one ghost ring.
struct Coeffs {
    a: Vec<f64>,
    b: Vec<f64>,
    max_a: f64,
    max_b: f64,
}

fn sample_coeffs(field: &CoefficientField, grid: &FPGrid, t: f64) -> Result<Coeffs> {
    let (d, m) = (grid.dim, field.noise_dim());
    let n = grid.cells + 2;
    let h = grid.h();
    let total = n.pow(d as u32);
    let mut a = vec![0.0; total * d * d];
    let mut b = vec![0.0; total * d];
    let (mut max_a, mut max_b): (f64, f64) = (0.0, 0.0);
    let mut e = field.workspace();
    let mut x = vec![0.0; d];
    let c = |i: usize| -grid.radius + (i as f64 - 0.5) * h;
    for idx in 0..total {
        if d == 1 {
            x[0] = c(idx);
        } else {
            x[0] = c(idx / n);
            x[1] = c(idx % n);
        }
        field.evaluate(t, &x, &mut e, false)?;
        let ai = diffusion_from_sigma(&e.sigma, d, m);
        let norm = if d == 1 {
            ai[0]
        } else {
            DMatrix::from_row_slice(d, d, &ai).symmetric_eigen().eigenvalues.max()
        };
        max_a = max_a.max(norm);
        max_b = max_b.max(e.drift.iter().map(|v| v * v).sum::<f64>().sqrt());
        a[idx * d * d..(idx + 1) * d * d].copy_from_slice(&ai);
        b[idx * d..(idx + 1) * d].copy_from_slice(&e.drift);
    }
    Ok(Coeffs { a, b, max_a, max_b })
}

/// `τ ≤ h² / (2d max‖a‖ + h max|b|)`.
fn stability_bound(grid: &FPGrid, c: &Coeffs) -> f64 {
    let h = grid.h();
    h * h / (2.0 * grid.dim as f64 * c.max_a + h * c.max_b)
}

/// One explicit step; returns the boundary outflow.
fn step(grid: &FPGrid, c: &Coeffs, tau: f64, u: &[f64], out: &mut [f64]) -> f64 {
    let h = grid.h();
    let n = grid.cells;
    let ne = n + 2;
    let d = grid.dim;
    if d == 1 {
        // padded value of cell i (ghost at 0 and n+1)
        let pu = |i: usize| if i == 0 || i == ne - 1 { 0.0 } else { u[i - 1] };
        // flux through the face between padded cells i and i+1
        let flux = |i: usize| {
            let bf = 0.5 * (c.b[i] + c.b[i + 1]);
            let adv = bf.max(0.0) * pu(i) + bf.min(0.0) * pu(i + 1);
            let dif = -0.5 * (c.a[i + 1] * pu(i + 1) - c.a[i] * pu(i)) / h;
            adv + dif
        };
        let mut prev = flux(0);
        let left = prev;
        for i in 1..=n {
            let next = flux(i);
            out[i - 1] = u[i - 1] - tau / h * (next - prev);
            prev = next;
        }
        return tau * (prev - left);
    }
    let pidx = |i: usize, j: usize| i * ne + j;
    let pu = |i: usize, j: usize| {
        if i == 0 || j == 0 || i == ne - 1 || j == ne - 1 {
            0.0
        } else {
            u[(i - 1) * n + (j - 1)]
        }
    };
    let a = |i: usize, j: usize, r: usize, s: usize| c.a[pidx(i, j) * 4 + r * 2 + s];
    let bv = |i: usize, j: usize, r: usize| c.b[pidx(i, j) * 2 + r];
    let au = |i: usize, j: usize, r: usize, s: usize| a(i, j, r, s) * pu(i, j);
    // face between (i,j) and (i+1,j)
    let fx = |i: usize, j: usize| {
        let bf = 0.5 * (bv(i, j, 0) + bv(i + 1, j, 0));
        let adv = bf.max(0.0) * pu(i, j) + bf.min(0.0) * pu(i + 1, j);
        let mut dif = -0.5 * (au(i + 1, j, 0, 0) - au(i, j, 0, 0)) / h;
        if j >= 1 && j + 1 < ne {
            let up = au(i, j + 1, 0, 1) + au(i + 1, j + 1, 0, 1);
            let dn = au(i, j - 1, 0, 1) + au(i + 1, j - 1, 0, 1);
            dif -= 0.5 * (up - dn) / (4.0 * h);
        }
        adv + dif
    };
    // face between (i,j) and (i,j+1)
    let fy = |i: usize, j: usize| {
        let bf = 0.5 * (bv(i, j, 1) + bv(i, j + 1, 1));
        let adv = bf.max(0.0) * pu(i, j) + bf.min(0.0) * pu(i, j + 1);
        let mut dif = -0.5 * (au(i, j + 1, 1, 1) - au(i, j, 1, 1)) / h;
        if i >= 1 && i + 1 < ne {
            let rt = au(i + 1, j, 1, 0) + au(i + 1, j + 1, 1, 0);
            let lt = au(i - 1, j, 1, 0) + au(i - 1, j + 1, 1, 0);
            dif -= 0.5 * (rt - lt) / (4.0 * h);
        }
        adv + dif
    };
    let mut outflow = Vec::with_capacity(4 * n);
    for k in 1..=n {
        outflow.push(fx(n, k) - fx(0, k));
        outflow.push(fy(k, n) - fy(k, 0));
    }
    for i in 1..=n {
        for j in 1..=n {
            let div = fx(i, j) - fx(i - 1, j) + fy(i, j) - fy(i, j - 1);
            out[(i - 1) * n + (j - 1)] = u[(i - 1) * n + (j - 1)] - tau / h * div;
        }
    }
    tau * h * pairwise_sum(&outflow)
}

/// Evolve `∂_t u = ½ Σ ∂_ij(a^{ij} u) − Σ ∂_i(b^i u)` from `u0` at `s` to `t`
/// with conservative upwind fluxes and absorbing boundary.
pub fn fp_solve(field: &CoefficientField, u0: &FPGrid, s: f64, t: f64, opts: &FPOptions) -> Result<FPSolution> {
    if field.dim() != u0.dim {
        return Err(Error::invalid("grid and field dimensions differ"));
    }
    if !(t >= s) {
        return Err(Error::invalid("fp_solve needs s ≤ t"));
    }
    if u0.values.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::invalid("initial density must be non-negative"));
    }
    let autonomous = field.meta().autonomous;
    let mut coeffs = sample_coeffs(field, u0, s)?;
    let mut bound = stability_bound(u0, &coeffs);
    if !autonomous {
        // Bound the step over the whole horizon on a coarse time sample.
        for k in 1..=8 {
            let c = sample_coeffs(field, u0, s + (t - s) * k as f64 / 8.0)?;
            bound = bound.min(stability_bound(u0, &c));
        }
    }
    let span = t - s;
    let (tau, steps) = match opts.tau {
        Some(tau) => {
            if tau > bound {
                return Err(Error::Stability { tau, bound });
            }
            if span == 0.0 {
                (tau, 0)
            } else {
                let steps = (span / tau).round() as usize;
                if steps == 0 || ((steps as f64) * tau - span).abs() > 1e-9 * span {
                    return Err(Error::invalid(format!("τ = {tau} does not divide the horizon {span}")));
                }
                (tau, steps)
            }
        }
        None => {
            if span == 0.0 {
                (0.9 * bound, 0)
            } else {
                let steps = (span / (0.9 * bound)).ceil() as usize;
                (span / steps as f64, steps)
            }
        }
    };
    let every = if opts.snapshots == 0 || steps == 0 {
        usize::MAX
    } else {
        (steps / (opts.snapshots + 1)).max(1)
    };
    let mut u = u0.values.clone();
    let mut next = vec![0.0; u.len()];
    let mut times = vec![s];
    let mut snaps = vec![u0.clone()];
    let mut leakage = Vec::with_capacity(steps);
    let mut clipped = 0.0;
    let mut audit: f64 = 0.0;
    let vol = u0.cell_volume();
    let mut mass = pairwise_sum(&u) * vol;
    for k in 0..steps {
        let tk = s + k as f64 * tau;
        if !autonomous && k > 0 {
            coeffs = sample_coeffs(field, u0, tk)?;
        }
        let leak = step(u0, &coeffs, tau, &u, &mut next);
        let mut clip = 0.0;
        for v in next.iter_mut() {
            if *v < 0.0 {
                clip -= *v;
                *v = 0.0;
            }
        }
        clip *= vol;
        clipped += clip;
        if clipped > opts.clip_tolerance {
            return Err(Error::SolverFailure(format!(
                "clipped negative mass {clipped:e} exceeds tolerance {:e} at step {}",
                opts.clip_tolerance,
                k + 1
            )));
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverFailure(format!("non-finite density at step {}", k + 1)));
        }
        std::mem::swap(&mut u, &mut next);
        let new_mass = pairwise_sum(&u) * vol;
        audit = audit.max((new_mass - mass + leak - clip).abs());
        mass = new_mass;
        leakage.push(leak);
        if (k + 1) % every == 0 && k + 1 < steps {
            times.push(tk + tau);
            snaps.push(FPGrid {
                values: u.clone(),
                ..u0.clone()
            });
        }
    }
    if steps > 0 {
        times.push(t);
        snaps.push(FPGrid {
            values: u,
            ..u0.clone()
        });
    }
    Ok(FPSolution {
        times,
        snapshots: snaps,
        tau,
        stability_bound: bound,
        steps,
        leakage,
        clipped,
        mass_audit: audit,
    })
}

/// Radius so that `N(0, (1 + spread)·Id)` leaves less than `1e-8` outside
/// the box, plus the drift excursion `L T`.
pub fn truncation_radius(spread: f64, growth: f64, horizon: f64) -> f64 {
    5.8 * (1.0 + spread).sqrt() + growth * horizon
}

/// `exp(1 − 1/(1 − |x−c|²/r²))` inside the ball, 0 outside; peak value 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub centre: Vec<f64>,
    pub radius: f64,
}

impl Bump {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let r2: f64 =
            x.iter().zip(&self.centre).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (self.radius * self.radius);
        if r2 >= 1.0 {
            0.0
        } else {
            (1.0 - 1.0 / (1.0 - r2)).exp()
        }
    }
}

/// Five bumps spread over the bulk of the law.
pub fn smooth_bump_set(dim: usize) -> Vec<Bump> {
    let spots: [(f64, f64, f64); 5] = [
        (0.0, 0.0, 1.5),
        (-1.2, 0.5, 1.0),
        (1.0, -0.8, 1.2),
        (2.0, 1.5, 1.5),
        (-2.5, -2.0, 2.0),
    ];
    spots
        .iter()
        .map(|&(a, b, r)| Bump {
            centre: if dim == 1 { vec![a] } else { vec![a, b] },
            radius: r,
        })
        .collect()
}

/// `∫ E φ(X_{s,t}(x)) dμ₀(x)` for each `φ`, with `μ₀` given by the ensemble
/// initial points.
pub fn mc_measure(
    field: &CoefficientField,
    spec: &EnsembleSpec,
    tests: &[&(dyn Fn(&[f64]) -> f64 + Sync)],
) -> Result<Vec<Estimate>> {
    let (layout, values) = map_ensemble(field, spec, |traj, x0, path| {
        let x = run_path(field, x0, path, traj, &mut ())?;
        Ok(tests.iter().map(|f| f(&x)).collect::<Vec<f64>>())
    })?;
    Ok(column_estimates(&layout, &values, tests.len()))
}

fn column_estimates(layout: &EnsembleLayout, values: &[Vec<f64>], k: usize) -> Vec<Estimate> {
    (0..k)
        .map(|c| {
            let col: Vec<f64> = values.iter().map(|v| v[c]).collect();
            layout.estimate(&col)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakErrorRow {
    pub test: usize,
    pub fp: f64,
    /// `|⟨φ, u_h⟩ − ⟨φ, u_{h/2}⟩|`.
    pub fp_error: f64,
    pub mc: Estimate,
    /// `|MC(dt) − MC(2dt)|` on the same paths.
    pub mc_bias: f64,
    pub discrepancy: f64,
    pub bar: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakErrorReport {
    pub rows: Vec<WeakErrorRow>,
    pub max_discrepancy: f64,
    pub passed: bool,
}

/// Compare `⟨φ, u_t⟩` from the PDE against the flow expectation for each
/// bump. The PDE value comes from spacing `h/2`; its bar is the change
/// from `h`. The MC bar is the batch error plus the change from `2dt`.
/// A row passes when the discrepancy is within three combined bars.
pub fn weak_error(
    field: &CoefficientField,
    u0: &FPGrid,
    spec: &EnsembleSpec,
    tests: &[Bump],
    opts: &FPOptions,
) -> Result<WeakErrorReport> {
    let coarse = fp_solve(field, u0, spec.s, spec.t, opts)?;
    let fine_u0 = refine_grid(u0)?;
    let fine_opts = FPOptions {
        tau: opts.tau.map(|t| t / 4.0),
        ..*opts
    };
    let fine = fp_solve(field, &fine_u0, spec.s, spec.t, &fine_opts)?;
    let grid = spec.grid()?;
    let factor = if grid.steps % 2 == 0 { 2 } else { 1 };
    let (layout, values) = map_ensemble(field, spec, |traj, x0, path| {
        let x = run_path(field, x0, path, traj, &mut ())?;
        let xc = if factor == 2 {
            run_path(field, x0, &path.coarsen(2)?, traj, &mut ())?
        } else {
            x.clone()
        };
        let mut row: Vec<f64> = tests.iter().map(|b| b.eval(&x)).collect();
        row.extend(tests.iter().map(|b| b.eval(&xc)));
        Ok(row)
    })?;
    let k = tests.len();
    let est = column_estimates(&layout, &values, 2 * k);
    let mut rows = Vec::with_capacity(k);
    for (i, b) in tests.iter().enumerate() {
        let fp_c = coarse.last().integrate(|x| b.eval(x));
        let fp_f = fine.last().integrate(|x| b.eval(x));
        let mc = est[i];
        let mc_bias = (est[i].mean - est[k + i].mean).abs();
        let discrepancy = (fp_f - mc.mean).abs();
        let bar = (fp_f - fp_c).abs() + mc.stderr + mc_bias;
        rows.push(WeakErrorRow {
            test: i,
            fp: fp_f,
            fp_error: (fp_f - fp_c).abs(),
            mc,
            mc_bias,
            discrepancy,
            bar,
            pass: discrepancy <= 3.0 * bar,
        });
    }
    Ok(WeakErrorReport {
        max_discrepancy: rows.iter().map(|r| r.discrepancy).fold(0.0, f64::max),
        passed: rows.iter().all(|r| r.pass),
        rows,
    })
}

/// The same density on a grid with half the spacing.
fn refine_grid(g: &FPGrid) -> Result<FPGrid> {
    let mut f = FPGrid::new(g.dim, g.radius, g.h() / 2.0)?;
    let n = g.cells;
    for idx in 0..f.values.len() {
        let src = if g.dim == 1 {
            idx / 2
        } else {
            let (i, j) = (idx / f.cells, idx % f.cells);
            (i / 2) * n + j / 2
        };
        f.values[idx] = g.values[src];
    }
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationBin {
    pub centre: Vec<f64>,
    pub samples: usize,
    /// Flow mass `Σ ω_i ρ(x_i) 1{X_i ∈ bin}`.
    pub flow_mass: f64,
    pub fp_mass: f64,
    /// `k̂ = flow_mass / ∫_bin u₀`.
    pub k_hat: f64,
    pub low_count: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationReport {
    pub bins: Vec<FactorizationBin>,
    /// `Σ |flow_mass − fp_mass|` over all bins.
    pub l1: f64,
    /// The same sum restricted to bins with enough samples.
    pub l1_populated: f64,
    pub low_count_bins: usize,
    /// Flow mass that left the grid.
    pub outside_mass: f64,
}

/// Compare the flow law `E (X_{s,t})_# μ₀`, binned from endpoints with
/// weights `ρ(x_i)`, against the PDE density merged into bins of `merge^d`
/// cells. `μ₀ = ρ γ_d`; the ensemble initials must sample `γ_d`.
pub fn density_factorization(
    finals: &[f64],
    initials: &[f64],
    layout: &EnsembleLayout,
    rho: impl Fn(&[f64]) -> f64,
    u0: &FPGrid,
    fp: &FPGrid,
    merge: usize,
    min_count: usize,
) -> Result<FactorizationReport> {
    let d = fp.dim;
    if merge == 0 || fp.cells % merge != 0 {
        return Err(Error::invalid(format!(
            "cannot merge {} cells in groups of {merge}",
            fp.cells
        )));
    }
    if finals.len() != layout.len() * d || initials.len() != finals.len() {
        return Err(Error::invalid("ensemble arrays do not match the layout"));
    }
    let nb = fp.cells / merge;
    let bw = fp.h() * merge as f64;
    let nbins = nb.pow(d as u32);
    let bin_of = |x: &[f64]| -> Option<usize> {
        let mut idx = 0;
        for v in x {
            let k = ((v + fp.radius) / bw).floor();
            if !(k >= 0.0 && k < nb as f64) {
                return None;
            }
            idx = idx * nb + k as usize;
        }
        Some(idx)
    };
    let mut counts = vec![0usize; nbins];
    let mut flow = vec![Vec::new(); nbins];
    let mut outside = Vec::new();
    for i in 0..layout.len() {
        let x = &finals[i * d..(i + 1) * d];
        let w = layout.weight(i) * rho(&initials[i * d..(i + 1) * d]);
        match bin_of(x) {
            Some(b) => {
                counts[b] += 1;
                flow[b].push(w);
            }
            None => outside.push(w),
        }
    }
    let mut fp_mass = vec![Vec::new(); nbins];
    let mut u0_mass = vec![Vec::new(); nbins];
    let vol = fp.cell_volume();
    for idx in 0..fp.values.len() {
        let c = fp.centre(idx);
        if let Some(b) = bin_of(&c) {
            fp_mass[b].push(fp.values[idx] * vol);
            u0_mass[b].push(u0.values[idx] * vol);
        }
    }
    let mut bins = Vec::with_capacity(nbins);
    let (mut l1, mut l1p) = (Vec::new(), Vec::new());
    for b in 0..nbins {
        let centre: Vec<f64> = if d == 1 {
            vec![-fp.radius + (b as f64 + 0.5) * bw]
        } else {
            vec![
                -fp.radius + ((b / nb) as f64 + 0.5) * bw,
                -fp.radius + ((b % nb) as f64 + 0.5) * bw,
            ]
        };
        let fm = pairwise_sum(&flow[b]);
        let pm = pairwise_sum(&fp_mass[b]);
        let um = pairwise_sum(&u0_mass[b]);
        let low = counts[b] < min_count;
        l1.push((fm - pm).abs());
        if !low {
            l1p.push((fm - pm).abs());
        }
        bins.push(FactorizationBin {
            centre,
            samples: counts[b],
            flow_mass: fm,
            fp_mass: pm,
            k_hat: if um > 0.0 { fm / um } else { f64::NAN },
            low_count: low,
        });
    }
    Ok(FactorizationReport {
        low_count_bins: bins.iter().filter(|b| b.low_count).count(),
        bins,
        l1: pairwise_sum(&l1),
        l1_populated: pairwise_sum(&l1p),
        outside_mass: pairwise_sum(&outside),
    })
}
