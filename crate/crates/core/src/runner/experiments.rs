//! Dispatch of configured experiments to the modules.

use std::path::{Path, PathBuf};

use crate::budget::{budget_constants, t0};
use crate::coefficients::{validate_hypotheses, CoefficientField};
use crate::convergence::{coupling_convergence, krylov_ratio, SupportBox};
use crate::density::{
    entropy_estimate, lp_norm_estimate, mass_estimate, simulate_density_ensemble, theorem_bound_rhs, DensityForm,
};
use crate::error::{Error, Result};
use crate::fokker_planck::{fp_solve, smooth_bump_set, truncation_radius, weak_error, FPGrid, FPOptions};
use crate::gaussian::GaussianQuadrature;
use crate::quadrature::linspace;
use crate::sde::{EnsembleSpec, InitialPoints, NoiseMode};
use crate::stats::Estimate;

use super::config::*;
use super::oracle::oracle_suite;
use super::report::{fmt_float, Detail, Report, ReportRow};

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: Report,
    pub files: Vec<PathBuf>,
}

fn bound_quadrature(d: usize, order: Option<usize>) -> Result<GaussianQuadrature> {
    GaussianQuadrature::gauss_hermite(d, order.unwrap_or(if d == 1 { 64 } else { 24 }))
}

fn mass_row(id: &str, est: &Estimate) -> ReportRow {
    ReportRow::value(id, "mass_deviation", (est.mean - 1.0).abs())
        .with_stderr(est.stderr)
        .with_bound(0.0)
}

/// Run `cfg` without touching the file system.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    let id = cfg.id();
    let field_name = cfg.field.as_ref().map(|f| f.name.clone());
    let mut rep = Report::new(&id, cfg.kind.name(), cfg.seed, field_name);
    if cfg.kind == ExperimentKind::OracleSuite {
        let p = cfg.oracle_suite.clone().unwrap_or_default();
        let mut detail = Detail::new("oracles", &["name", "closed_form", "recomputed", "tolerance", "pass"]);
        for r in oracle_suite(cfg.seed, p.mc_samples)? {
            rep.push(ReportRow::value(&id, r.name.clone(), r.discrepancy()).with_bound(r.tolerance));
            detail.push(vec![
                r.name.clone(),
                fmt_float(r.closed_form),
                fmt_float(r.recomputed),
                fmt_float(r.tolerance),
                r.pass().to_string(),
            ]);
        }
        rep.details.push(detail);
        return Ok(rep);
    }
    let field = cfg.field()?.build()?;
    match cfg.kind {
        ExperimentKind::DensityBound => density_bound(cfg, &field, &mut rep)?,
        ExperimentKind::EntropyBudget => entropy_budget(cfg, &field, &mut rep)?,
        ExperimentKind::Coupling => coupling(cfg, &field, &mut rep)?,
        ExperimentKind::Krylov => krylov(cfg, &field, &mut rep)?,
        ExperimentKind::FokkerPlanck => fokker_planck(cfg, &field, &mut rep)?,
        ExperimentKind::Validate => validate(cfg, &field, &mut rep)?,
        ExperimentKind::OracleSuite => unreachable!(),
    }
    Ok(rep)
}

/// Run `cfg` and write its reports under `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    let report = run_experiment(cfg)?;
    let files = report.write(out)?;
    Ok(RunOutcome { report, files })
}

fn density_bound(cfg: &ExperimentConfig, field: &CoefficientField, rep: &mut Report) -> Result<()> {
    let p = cfg.density_bound.as_ref().expect("checked");
    let id = rep.id.clone();
    let spec = EnsembleSpec {
        s: p.s,
        t: p.t,
        dt: p.dt,
        initials: p.initials.clone(),
        replicas: p.replicas,
        noise: p.noise,
        seed: cfg.seed,
    };
    let ens = simulate_density_ensemble(field, &spec, p.form.unwrap_or(DensityForm::Ito), false)?;
    let quad = bound_quadrature(field.dim(), p.quadrature_order)?;
    let tgrid = linspace(p.s, p.t, p.time_nodes);
    let mut detail = Detail::new("lp", &["p", "lp_norm", "stderr", "bound", "pass"]);
    for &q in &p.p {
        let est = lp_norm_estimate(&ens, q)?;
        let mut row = ReportRow::estimate(&id, format!("lp_norm[p={q}]"), &est);
        match theorem_bound_rhs(field, p.s, p.t, q, &quad, &tgrid) {
            Ok(b) => row = row.with_bound(b),
            Err(Error::Divergent { .. }) => rep.notes.push(format!("bound for p={q} is not integrable")),
            Err(e) => return Err(e),
        }
        detail.push(vec![
            fmt_float(q),
            fmt_float(est.mean),
            fmt_float(est.stderr),
            row.bound.map(fmt_float).unwrap_or_default(),
            row.pass().map(|b| b.to_string()).unwrap_or_default(),
        ]);
        rep.push(row);
    }
    rep.push(mass_row(&id, &mass_estimate(&ens)?));
    rep.push(ReportRow::estimate(&id, "entropy", &entropy_estimate(&ens)?));
    rep.details.push(detail);
    Ok(())
}

fn entropy_budget(cfg: &ExperimentConfig, field: &CoefficientField, rep: &mut Report) -> Result<()> {
    let p = cfg.entropy_budget.as_ref().expect("checked");
    let id = rep.id.clone();
    let meta = field.meta();
    let horizon = p.t.unwrap_or_else(|| t0(meta.growth, meta.lambda));
    let quad = bound_quadrature(field.dim(), p.quadrature_order)?;
    let budget = budget_constants(field, horizon, &quad, &linspace(0.0, horizon, p.time_nodes))?;
    let dt = p.dt.unwrap_or(horizon / p.steps as f64);
    let spec = EnsembleSpec {
        s: 0.0,
        t: horizon,
        dt,
        initials: p.initials.clone(),
        replicas: p.replicas,
        noise: p.noise,
        seed: cfg.seed,
    };
    let ens = simulate_density_ensemble(field, &spec, DensityForm::Ito, false)?;
    let ent = entropy_estimate(&ens)?;
    rep.push(ReportRow::estimate(&id, "entropy", &ent).with_bound(budget.entropy_bound_abs));
    rep.push(mass_row(&id, &mass_estimate(&ens)?));
    let mut detail = Detail::new("budget", &["constant", "value"]);
    for (name, v) in [
        ("horizon", budget.horizon),
        ("growth", budget.growth),
        ("lambda", budget.lambda),
        ("sigma_t", budget.sigma_t),
        ("m1", budget.m1),
        ("m2", budget.m2),
        ("t0", budget.t0),
        ("lambda_t0", budget.lambda_t0),
        ("c1", budget.c1),
        ("c2", budget.c2),
        ("n_tilde", budget.n_tilde as f64),
        ("entropy_bound", budget.entropy_bound),
        ("entropy_bound_abs", budget.entropy_bound_abs),
    ] {
        rep.push(ReportRow::value(&id, name, v));
        detail.push(vec![name.to_string(), fmt_float(v)]);
    }
    rep.details.push(detail);
    Ok(())
}

fn coupling(cfg: &ExperimentConfig, field: &CoefficientField, rep: &mut Report) -> Result<()> {
    let p = cfg.coupling.as_ref().expect("checked");
    let id = rep.id.clone();
    let spec = EnsembleSpec {
        s: p.s,
        t: p.t,
        dt: p.dt,
        initials: InitialPoints::single(p.x0.clone()),
        replicas: p.trajectories,
        noise: NoiseMode::Independent,
        seed: cfg.seed,
    };
    let table = coupling_convergence(field, &p.levels, p.n_ref, &spec)?;
    let mut detail = Detail::new("deviation", &["n", "deviation", "stderr"]);
    for r in &table.rows {
        rep.push(ReportRow::estimate(&id, format!("deviation[n={}]", r.n), &r.deviation));
        detail.push(vec![
            r.n.to_string(),
            fmt_float(r.deviation.mean),
            fmt_float(r.deviation.stderr),
        ]);
    }
    let steps = table.rows.len().saturating_sub(1);
    rep.push(ReportRow::value(&id, "non_decreasing_steps", (steps - table.decreases) as f64).with_bound(1.0));
    rep.push(ReportRow::value(&id, "final_ratio", table.final_ratio).with_bound(1.0 / 3.0));
    rep.details.push(detail);
    Ok(())
}

fn krylov(cfg: &ExperimentConfig, field: &CoefficientField, rep: &mut Report) -> Result<()> {
    let p = cfg.krylov.as_ref().expect("checked");
    let id = rep.id.clone();
    let spec = EnsembleSpec {
        s: p.s,
        t: p.t,
        dt: p.dt,
        initials: InitialPoints::single(p.x0.clone()),
        replicas: p.trajectories,
        noise: NoiseMode::Independent,
        seed: cfg.seed,
    };
    let (lo, hi) = (p.lo.clone(), p.hi.clone());
    let f = move |_t: f64, x: &[f64]| -> f64 {
        let inside = x.iter().zip(lo.iter().zip(&hi)).all(|(v, (a, b))| *v >= *a && *v <= *b);
        if inside {
            1.0
        } else {
            0.0
        }
    };
    let support = SupportBox {
        t0: p.s,
        t1: p.t,
        lo: p.lo.clone(),
        hi: p.hi.clone(),
    };
    let res = krylov_ratio(field, &f, Some(&support), p.lambda, &spec)?;
    rep.push(ReportRow::estimate(&id, "functional", &res.functional));
    rep.push(ReportRow::value(&id, "norm", res.norm));
    rep.push(ReportRow::value(&id, "ratio", res.ratio).with_stderr(res.ratio_stderr));
    Ok(())
}

fn fokker_planck(cfg: &ExperimentConfig, field: &CoefficientField, rep: &mut Report) -> Result<()> {
    let p = cfg.fokker_planck.as_ref().expect("checked");
    let id = rep.id.clone();
    let d = field.dim();
    let horizon = p.t - p.s;
    let radius = p
        .radius
        .unwrap_or_else(|| truncation_radius(1.0, field.meta().growth, horizon));
    let radius = (radius / p.h).ceil() * p.h;
    let u0 = FPGrid::gaussian(d, radius, p.h)?;
    let opts = FPOptions {
        tau: p.tau,
        snapshots: p.snapshots,
        ..FPOptions::default()
    };
    let sol = fp_solve(field, &u0, p.s, p.t, &opts)?;
    rep.push(ReportRow::value(&id, "mass_audit", sol.mass_audit).with_bound(1e-10));
    rep.push(ReportRow::value(&id, "leakage", sol.total_leakage()));
    rep.push(ReportRow::value(&id, "clipped", sol.clipped).with_bound(opts.clip_tolerance));
    rep.push(ReportRow::value(&id, "tau", sol.tau).with_bound(sol.stability_bound));
    let (mean, var) = sol.last().moments();
    rep.push(ReportRow::value(&id, "mean_x1", mean));
    rep.push(ReportRow::value(&id, "variance_x1", var));
    let spec = EnsembleSpec {
        s: p.s,
        t: p.t,
        dt: p.dt,
        initials: InitialPoints::Sampled { count: p.trajectories },
        replicas: 1,
        noise: NoiseMode::Independent,
        seed: cfg.seed,
    };
    let we = weak_error(field, &u0, &spec, &smooth_bump_set(d), &opts)?;
    let mut detail = Detail::new(
        "weak_error",
        &[
            "test",
            "fp",
            "fp_error",
            "mc",
            "mc_stderr",
            "mc_bias",
            "discrepancy",
            "bar",
            "pass",
        ],
    );
    for r in &we.rows {
        rep.push(
            ReportRow::value(&id, format!("weak_error[{}]", r.test), r.discrepancy)
                .with_stderr(r.bar)
                .with_bound(0.0),
        );
        detail.push(vec![
            r.test.to_string(),
            fmt_float(r.fp),
            fmt_float(r.fp_error),
            fmt_float(r.mc.mean),
            fmt_float(r.mc.stderr),
            fmt_float(r.mc_bias),
            fmt_float(r.discrepancy),
            fmt_float(r.bar),
            r.pass.to_string(),
        ]);
    }
    rep.details.push(detail);
    let header: Vec<&str> = match d {
        1 => vec!["time", "x1", "density"],
        _ => vec!["time", "x1", "x2", "density"],
    };
    let mut dens = Detail::new("density", &header);
    for (t, g) in sol.times.iter().zip(&sol.snapshots) {
        for (idx, v) in g.values.iter().enumerate() {
            let mut row = vec![fmt_float(*t)];
            row.extend(g.centre(idx).into_iter().map(fmt_float));
            row.push(fmt_float(*v));
            dens.push(row);
        }
    }
    rep.details.push(dens);
    Ok(())
}

fn validate(cfg: &ExperimentConfig, field: &CoefficientField, rep: &mut Report) -> Result<()> {
    let p = cfg.validate.as_ref().expect("checked");
    let id = rep.id.clone();
    let quad = bound_quadrature(field.dim(), p.quadrature_order)?;
    let v = validate_hypotheses(field, p.t, &quad, &linspace(0.0, p.t, p.time_nodes))?;
    rep.push(ReportRow::value(&id, "min_eigenvalue", v.min_eigenvalue));
    if let Some(c1) = v.declared_c1 {
        rep.push(ReportRow::value(&id, "c1", c1));
        // Ellipticity `σσ* ≥ c₁ I` as `c₁ − λ_min ≤ 0`.
        rep.push(ReportRow::value(&id, "ellipticity_gap", c1 - v.min_eigenvalue).with_bound(1e-12));
    }
    rep.push(ReportRow::value(&id, "growth_ratio", v.growth_ratio).with_bound(v.declared_growth));
    rep.push(ReportRow::value(&id, "lambda", v.lambda));
    match v.sigma_t {
        Some(s) => rep.push(ReportRow::value(&id, "sigma_t", s)),
        None => rep.notes.push(format!(
            "Σ_T diverges (log value {:.3}, tail fraction {:.3})",
            v.log_sigma_t, v.tail_fraction
        )),
    }
    rep.push(ReportRow::value(&id, "tail_fraction", v.tail_fraction));
    rep.push(ReportRow::value(&id, "grad_sigma_norm", v.grad_sigma_norm));
    Ok(())
}
