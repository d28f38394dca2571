//! Acceptance suite: one PASS/FAIL line per criterion, followed by the
//! numbers it was judged on. Exits non-zero when any criterion fails.

use std::time::Instant;

use flowdens::budget::{budget_constants, t0};
use flowdens::coefficients::{
    builtin_coefficients, regularize, regularize_drift, CoefficientField, FieldParams, ParamValue, RegularizationLevel,
};
use flowdens::convergence::{coupling_convergence, krylov_ratio, SupportBox};
use flowdens::density::{
    density_record, entropy_estimate, log_density_along, log_density_stratonovich, lp_norm_estimate, mass_estimate,
    simulate_density_ensemble, theorem_bound_rhs, DensityForm,
};
use flowdens::fokker_planck::{
    density_factorization, fp_solve, smooth_bump_set, truncation_radius, weak_error, FPGrid, FPOptions,
};
use flowdens::gaussian::{
    first_absolute_moment, gauss_divergence, ou_smooth_scalar, GaussianQuadrature, VectorFieldHandle,
};
use flowdens::quadrature::{composite_legendre, linspace};
use flowdens::rng::{normal_cdf, Domain, Stream};
use flowdens::runner::oracle::{ou_lp, translate_bound, translate_lp};
use flowdens::runner::{oracle_suite, run, ExperimentConfig};
use flowdens::sde::{
    map_ensemble, sample_brownian, simulate, simulate_ensemble, EnsembleSpec, InitialPoints, NoiseMode, TimeGrid,
};
use flowdens::stats::Estimate;
use flowdens::Error;

struct Outcome {
    pass: bool,
    summary: String,
    details: Vec<String>,
}

/// Mass estimates gathered from the runs of criteria 2 to 4.
type MassLog = Vec<(String, Estimate)>;

type ScalarFn = Box<dyn Fn(&[f64]) -> f64>;

fn field(name: &str, dim: usize, params: &[(&str, f64)]) -> CoefficientField {
    let p: FieldParams = params
        .iter()
        .map(|(k, v)| (k.to_string(), ParamValue::Scalar(*v)))
        .collect();
    builtin_coefficients(name, dim, &p).unwrap()
}

fn anisotropic() -> CoefficientField {
    let mut p = FieldParams::new();
    p.insert("sigma".into(), ParamValue::Matrix(vec![vec![1.0, 0.3], vec![0.0, 0.8]]));
    builtin_coefficients("anisotropic", 2, &p).unwrap()
}

fn criterion_1() -> Outcome {
    let mut details = Vec::new();
    // Adjoint identity, polynomial B against polynomial f with Hermite rules.
    let gh1 = GaussianQuadrature::gauss_hermite(1, 32).unwrap();
    let gh2 = GaussianQuadrature::gauss_hermite(2, 16).unwrap();
    type Poly = (&'static str, usize, fn(&[f64], &mut [f64]), fn(&[f64], &mut [f64]));
    let fields: [Poly; 5] = [
        ("x", 1, |x, o| o[0] = x[0], |_, j| j[0] = 1.0),
        ("x^2", 1, |x, o| o[0] = x[0] * x[0], |x, j| j[0] = 2.0 * x[0]),
        (
            "x^3+1",
            1,
            |x, o| o[0] = x[0].powi(3) + 1.0,
            |x, j| j[0] = 3.0 * x[0] * x[0],
        ),
        (
            "(x2,-x1)",
            2,
            |x, o| {
                o[0] = x[1];
                o[1] = -x[0];
            },
            |_, j| {
                j.copy_from_slice(&[0.0, 1.0, -1.0, 0.0]);
            },
        ),
        (
            "(x1^2,x1x2)",
            2,
            |x, o| {
                o[0] = x[0] * x[0];
                o[1] = x[0] * x[1];
            },
            |x, j| {
                j.copy_from_slice(&[2.0 * x[0], 0.0, x[1], x[0]]);
            },
        ),
    ];
    type Test = (&'static str, fn(&[f64]) -> f64, fn(&[f64], &mut [f64]));
    let tests1: [Test; 3] = [
        ("1+x", |x| 1.0 + x[0], |_, g| g[0] = 1.0),
        ("x^2", |x| x[0] * x[0], |x, g| g[0] = 2.0 * x[0]),
        ("x^4-x", |x| x[0].powi(4) - x[0], |x, g| g[0] = 4.0 * x[0].powi(3) - 1.0),
    ];
    let tests2: [Test; 2] = [
        (
            "x1x2",
            |x| x[0] * x[1],
            |x, g| {
                g[0] = x[1];
                g[1] = x[0];
            },
        ),
        (
            "x1^2+x2^3",
            |x| x[0] * x[0] + x[1].powi(3),
            |x, g| {
                g[0] = 2.0 * x[0];
                g[1] = 3.0 * x[1] * x[1];
            },
        ),
    ];
    let mut adjoint_max: f64 = 0.0;
    for (bname, d, b, jb) in fields {
        let handle = VectorFieldHandle::new(d, b)
            .with_jacobian(jb)
            .without_finite_differences();
        let (quad, tests): (&GaussianQuadrature, &[Test]) = if d == 1 { (&gh1, &tests1) } else { (&gh2, &tests2) };
        for (fname, f, gf) in tests {
            let lhs = quad
                .expect(|x| {
                    let (mut bv, mut g) = ([0.0; 2], [0.0; 2]);
                    b(x, &mut bv[..d]);
                    gf(x, &mut g[..d]);
                    (0..d).map(|i| bv[i] * g[i]).sum()
                })
                .unwrap();
            let rhs = quad.expect(|x| f(x) * gauss_divergence(&handle, x).unwrap()).unwrap();
            adjoint_max = adjoint_max.max((lhs - rhs).abs());
            details.push(format!(
                "adjoint B={bname} f={fname}: |lhs-rhs| = {:.2e}",
                (lhs - rhs).abs()
            ));
        }
    }
    // Smooth compactly supported f on a fine lattice.
    let lat = GaussianQuadrature::lattice(1, 32, 9.0).unwrap();
    let bump = |x: f64| {
        if x.abs() < 1.5 {
            (1.0 - 1.0 / (1.0 - x * x / 2.25)).exp()
        } else {
            0.0
        }
    };
    let dbump = |x: f64| {
        if x.abs() < 1.5 {
            let u = 1.0 - x * x / 2.25;
            bump(x) * (-2.0 * x / 2.25) / (u * u)
        } else {
            0.0
        }
    };
    let cubic = VectorFieldHandle::new(1, |x, o| o[0] = x[0].powi(3) - 2.0 * x[0])
        .with_jacobian(|x, j| j[0] = 3.0 * x[0] * x[0] - 2.0)
        .without_finite_differences();
    let lhs = lat.expect(|x| (x[0].powi(3) - 2.0 * x[0]) * dbump(x[0] - 0.3)).unwrap();
    let rhs = lat
        .expect(|x| bump(x[0] - 0.3) * gauss_divergence(&cubic, x).unwrap())
        .unwrap();
    adjoint_max = adjoint_max.max((lhs - rhs).abs());
    details.push(format!(
        "adjoint B=x^3-2x f=bump: |lhs-rhs| = {:.2e}",
        (lhs - rhs).abs()
    ));

    // Invariance of γ under P_ε.
    let mut inv_max: f64 = 0.0;
    let inner = GaussianQuadrature::gauss_hermite(1, 48).unwrap();
    for eps in [0.01, 0.1, 0.5, 1.0, 3.0] {
        for f in [
            (|x: &[f64]| x[0].powi(4) + x[0]) as fn(&[f64]) -> f64,
            |x: &[f64]| x[0].cos(),
            |x: &[f64]| (0.5 * x[0]).exp(),
        ] {
            let direct = inner.expect(f).unwrap();
            let smoothed = gh1.expect(|x| ou_smooth_scalar(f, eps, x, &inner).unwrap()).unwrap();
            inv_max = inv_max.max((direct - smoothed).abs());
        }
    }
    let gh2i = GaussianQuadrature::gauss_hermite(2, 24).unwrap();
    let f2 = |x: &[f64]| (x[0] * x[1]).cos() + x[0] * x[0] * x[1];
    for eps in [0.05, 0.5, 2.0] {
        let direct = gh2i.expect(f2).unwrap();
        let smoothed = gh2.expect(|x| ou_smooth_scalar(f2, eps, x, &gh2i).unwrap()).unwrap();
        inv_max = inv_max.max((direct - smoothed).abs());
    }
    details.push(format!("invariance: max |∫P_ε f dγ - ∫f dγ| = {inv_max:.2e}"));

    // Linear-growth bound on sampled balls.
    let mut growth_max: f64 = 0.0;
    let lat2 = GaussianQuadrature::lattice(2, 6, 7.0).unwrap();
    for d in [1usize, 2] {
        let m1 = first_absolute_moment(d).unwrap();
        let quad = if d == 1 { &lat } else { &lat2 };
        for big_l in [0.5, 1.0, 3.0] {
            let fs: [ScalarFn; 3] = [
                Box::new(move |x: &[f64]| big_l * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt())),
                Box::new(move |x: &[f64]| big_l * x[0].signum() * (1.0 + x[0].abs())),
                Box::new(move |x: &[f64]| big_l * x.iter().map(|v| v * v).sum::<f64>().sqrt()),
            ];
            for f in &fs {
                for radius in [1.0, 5.0, 20.0] {
                    let mut rng = Stream::new(17, Domain::Oracle, (d * 100 + radius as usize) as u64);
                    for _ in 0..12 {
                        let mut x = vec![0.0; d];
                        rng.fill_normal(&mut x);
                        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let r = radius * rng.uniform().powf(1.0 / d as f64);
                        x.iter_mut().for_each(|v| *v *= r / n);
                        let nx = r;
                        for eps in [1e-3, 0.1, 0.5, 1.0] {
                            let v = ou_smooth_scalar(f, eps, &x, quad).unwrap();
                            let bound = big_l * (1.0 + m1) * (1.0 + nx);
                            growth_max = growth_max.max(v.abs() / bound);
                        }
                    }
                }
            }
        }
    }
    details.push(format!("growth: max |P_ε f| / L(1+M_1)(1+|x|) = {growth_max:.4}"));
    Outcome {
        pass: adjoint_max <= 1e-6 && inv_max <= 1e-8 && growth_max <= 1.0,
        summary: format!(
            "adjoint {adjoint_max:.1e} (≤1e-6), invariance {inv_max:.1e} (≤1e-8), growth ratio {growth_max:.3} (≤1)"
        ),
        details,
    }
}

fn criterion_2(masses: &mut MassLog) -> Outcome {
    let mut details = Vec::new();
    let tr = field("translate", 1, &[]);
    let grid = TimeGrid::new(0.0, 0.25, 1e-3).unwrap();
    let (mut err_ito, mut err_str, mut norm) = (0.0, 0.0, 0.0);
    let mut worst_str: f64 = 0.0;
    let n = 10_000u64;
    for i in 0..n {
        let x0 = [Stream::new(2, Domain::Initial, i).normal()];
        let path = sample_brownian(grid, 1, 2, i);
        let traj = simulate(&tr, &x0, &path).unwrap();
        let ito = log_density_along(&tr, &traj, &path).unwrap();
        let strat = log_density_stratonovich(&tr, &traj, &path).unwrap();
        let w = path.total()[0];
        let target = x0[0] * w + 0.5 * w * w;
        err_ito += (-ito.log_k_tilde - target).powi(2);
        err_str += (-strat.log_k_tilde - target).powi(2);
        worst_str = worst_str.max((-strat.log_k_tilde - target).abs() / target.abs().max(1e-3));
        norm += target * target;
    }
    let rel_str = (err_str / norm).sqrt();
    let rel_ito = (err_ito / norm).sqrt();
    details.push(format!("per-path relative L2 error over {n} paths, dt=1e-3: midpoint form {rel_str:.2e}, left-point form {rel_ito:.2e}"));
    details.push(format!("midpoint form worst per-path relative error {worst_str:.2e}"));

    let spec = EnsembleSpec {
        s: 0.0,
        t: 0.25,
        dt: 1e-3,
        initials: InitialPoints::Grid { order: 8 },
        replicas: 12_500,
        noise: NoiseMode::Shared,
        seed: 20,
    };
    let ens = simulate_density_ensemble(&tr, &spec, DensityForm::Ito, false).unwrap();
    let l2 = lp_norm_estimate(&ens, 2.0).unwrap();
    let exact = translate_lp(2.0, 0.25);
    let z = (l2.mean - exact).abs() / l2.stderr;
    details.push(format!(
        "L2 at t-s=0.25: {:.5} ± {:.5} vs {exact:.5} ({z:.2} stderr, {} trajectories)",
        l2.mean,
        l2.stderr,
        ens.len()
    ));
    masses.push(("translate τ=0.25 grid".into(), mass_estimate(&ens).unwrap()));
    Outcome {
        pass: rel_str <= 1e-2 && z <= 3.0,
        summary: format!(
            "path error {rel_str:.1e} (≤1e-2), L2 {:.4}±{:.4} vs {exact:.4} ({z:.2}σ ≤ 3)",
            l2.mean, l2.stderr
        ),
        details,
    }
}

fn criterion_3(masses: &mut MassLog) -> Outcome {
    let mut details = Vec::new();
    let gh = GaussianQuadrature::gauss_hermite(1, 64).unwrap();
    let mut pass = true;
    let (mut compared, mut skipped) = (0, 0);
    let mut hand = (f64::NAN, f64::NAN, f64::NAN);
    // The Euler density of the OU flow carries an O(dt) mass bias that the
    // Hermite initials resolve at dt = 1e-3, hence the finer step.
    for (name, f, dt) in [
        ("translate", field("translate", 1, &[]), 1e-3),
        ("ou_linear", field("ou_linear", 1, &[("a", 1.0)]), 1e-4),
    ] {
        for tau in [0.05, 0.1, 0.25] {
            let spec = EnsembleSpec {
                s: 0.0,
                t: tau,
                dt,
                initials: InitialPoints::Grid { order: 8 },
                replicas: 10_000,
                noise: NoiseMode::Shared,
                seed: 30,
            };
            let ens = simulate_density_ensemble(&f, &spec, DensityForm::Ito, false).unwrap();
            masses.push((format!("{name} τ={tau} dt={dt:e}"), mass_estimate(&ens).unwrap()));
            for p in [1.5, 2.0, 3.0] {
                let lhs = lp_norm_estimate(&ens, p).unwrap();
                let exact = if name == "translate" {
                    translate_lp(p, tau)
                } else {
                    ou_lp(1.0, p, tau)
                };
                match theorem_bound_rhs(&f, 0.0, tau, p, &gh, &[0.0, tau]) {
                    Ok(rhs) => {
                        compared += 1;
                        let ok = lhs.mean <= rhs + 3.0 * lhs.stderr;
                        pass &= ok;
                        details.push(format!(
                            "{name} p={p} τ={tau}: LHS {:.5} ± {:.5} (closed form {exact:.5}) ≤ RHS {rhs:.5}: {ok}",
                            lhs.mean, lhs.stderr
                        ));
                        if name == "translate" && p == 2.0 && tau == 0.1 {
                            hand = (lhs.mean, lhs.stderr, rhs);
                        }
                    }
                    Err(Error::Divergent { .. }) => {
                        skipped += 1;
                        details.push(format!("{name} p={p} τ={tau}: RHS not integrable, skipped"));
                    }
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }
    let hand_ok = (hand.0 - 1.0574).abs() <= 3.0 * hand.1 + 5e-5 && (hand.2 - 1.1823).abs() <= 5e-5;
    details.push(format!(
        "hand instance p=2 τ=0.1: LHS {:.5} ± {:.5} (≈1.0574), RHS {:.6} (≈1.1823, closed form {:.6})",
        hand.0,
        hand.1,
        hand.2,
        translate_bound(2.0, 0.1)
    ));
    Outcome {
        pass: pass && hand_ok && compared > 0,
        summary: format!(
            "{compared} integrable cases ordered, {skipped} not integrable; hand instance {:.4} ≤ {:.4}",
            hand.0, hand.2
        ),
        details,
    }
}

fn criterion_4(masses: &mut MassLog) -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    let bases: Vec<(&str, CoefficientField)> = vec![
        ("translate", field("translate", 1, &[])),
        ("ou_linear", field("ou_linear", 1, &[("a", 1.0)])),
        ("sign_drift", field("sign_drift", 1, &[])),
        ("anisotropic", anisotropic()),
    ];
    for (name, base) in &bases {
        for n in [8u32, 32] {
            let f = regularize(base, RegularizationLevel::new(n).unwrap()).unwrap();
            let d = f.dim();
            let horizon = t0(f.meta().growth, f.meta().lambda);
            let quad = GaussianQuadrature::gauss_hermite(d, if d == 1 { 64 } else { 24 }).unwrap();
            let budget = budget_constants(&f, horizon, &quad, &linspace(0.0, horizon, 5)).unwrap();
            let spec = EnsembleSpec {
                s: 0.0,
                t: horizon,
                dt: horizon / 16.0,
                initials: InitialPoints::Sampled {
                    count: if d == 1 { 20_000 } else { 4000 },
                },
                replicas: 1,
                noise: NoiseMode::Independent,
                seed: 40 + n as u64,
            };
            let ens = simulate_density_ensemble(&f, &spec, DensityForm::Ito, false).unwrap();
            let ent = entropy_estimate(&ens).unwrap();
            masses.push((format!("{name}^n={n} T=T0"), mass_estimate(&ens).unwrap()));
            let ok = ent.mean <= budget.entropy_bound_abs + 3.0 * ent.stderr;
            pass &= ok;
            details.push(format!(
                "{name} n={n}: T0={:.3e}, Ñ={}, entropy {:.3e} ± {:.1e} ≤ {:.4} (2C1√TΛ + C2TΛ² = {:.4}, C1={:.3}, C2={:.3}, Λ={:.3}): {ok}",
                horizon, budget.n_tilde, ent.mean, ent.stderr, budget.entropy_bound_abs, budget.entropy_bound, budget.c1, budget.c2, budget.lambda_t0
            ));
        }
    }

    // Entropy of the sign drift (mollified at n = 16) under dt-halving on common paths.
    let sign = field("sign_drift", 1, &[]);
    let reg = regularize_drift(
        &sign,
        RegularizationLevel::new(16).unwrap(),
        &GaussianQuadrature::default_lattice(1).unwrap(),
    )
    .unwrap();
    let spec = EnsembleSpec {
        s: 0.0,
        t: 0.25,
        dt: 5e-4,
        initials: InitialPoints::Sampled { count: 20_000 },
        replicas: 1,
        noise: NoiseMode::Independent,
        seed: 44,
    };
    let (layout, recs) = map_ensemble(&reg, &spec, |traj, x0, path| {
        let fine = density_record(&reg, x0, path, traj)?;
        let coarse = density_record(&reg, x0, &path.coarsen(2)?, traj)?;
        Ok((fine.log_k_tilde, coarse.log_k_tilde))
    })
    .unwrap();
    let ent_f = layout.estimate(&recs.iter().map(|r| r.0.abs()).collect::<Vec<_>>());
    let ent_c = layout.estimate(&recs.iter().map(|r| r.1.abs()).collect::<Vec<_>>());
    let mass_f = layout.log_estimate(&recs.iter().map(|r| r.0).collect::<Vec<_>>());
    masses.push((
        "sign_drift^16 τ=0.25 dt=5e-4".into(),
        Estimate {
            mean: mass_f.mean(),
            stderr: mass_f.stderr(),
            samples: mass_f.samples,
        },
    ));
    let rel = (ent_f.mean - ent_c.mean).abs() / ent_f.mean;
    let stable = ent_f.mean.is_finite() && ent_c.mean.is_finite() && rel <= 0.10;
    details.push(format!(
        "sign_drift n=16, τ=0.25: entropy {:.5} ± {:.5} at dt=5e-4, {:.5} ± {:.5} at dt=1e-3, relative change {:.2}%",
        ent_f.mean,
        ent_f.stderr,
        ent_c.mean,
        ent_c.stderr,
        100.0 * rel
    ));
    Outcome {
        pass: pass && stable,
        summary: format!(
            "8 regularized fields within budget; sign_drift entropy {:.4} changes {:.2}% under dt-halving (≤10%)",
            ent_f.mean,
            100.0 * rel
        ),
        details,
    }
}

fn criterion_5(masses: &MassLog) -> Outcome {
    let mut details = Vec::new();
    let mut worst: f64 = 0.0;
    for (label, m) in masses {
        let z = (m.mean - 1.0).abs() / m.stderr;
        worst = worst.max(z);
        details.push(format!("{label}: {:.6} ± {:.1e} ({z:.2} stderr)", m.mean, m.stderr));
    }
    let spec = EnsembleSpec {
        s: 0.0,
        t: 0.25,
        dt: 1e-3,
        initials: InitialPoints::Grid { order: 8 },
        replicas: 10_000,
        noise: NoiseMode::Shared,
        seed: 30,
    };
    let ou = field("ou_linear", 1, &[("a", 1.0)]);
    let m = mass_estimate(&simulate_density_ensemble(&ou, &spec, DensityForm::Ito, false).unwrap()).unwrap();
    details.push(format!(
        "not counted: ou_linear τ=0.25 at dt=1e-3 gives {:.6} ± {:.1e} ({:.2} stderr), the Euler bias of the coarser step",
        m.mean,
        m.stderr,
        (m.mean - 1.0).abs() / m.stderr
    ));
    Outcome {
        pass: !masses.is_empty() && worst <= 3.0,
        summary: format!("{} runs, worst deviation {worst:.2} stderr (≤3)", masses.len()),
        details,
    }
}

fn criterion_6() -> Outcome {
    let f = field("sign_drift", 1, &[]);
    let spec = EnsembleSpec {
        s: 0.0,
        t: 1.0,
        dt: 1e-3,
        initials: InitialPoints::single(vec![0.0]),
        replicas: 10_000,
        noise: NoiseMode::Independent,
        seed: 60,
    };
    let table = coupling_convergence(&f, &[4, 8, 16, 32, 64], 128, &spec).unwrap();
    let details = table
        .rows
        .iter()
        .map(|r| {
            format!(
                "n={:>3}: E sup|X^n - X^128| = {:.5} ± {:.5}",
                r.n, r.deviation.mean, r.deviation.stderr
            )
        })
        .collect();
    Outcome {
        pass: table.decreases >= 4 && table.final_ratio <= 1.0 / 3.0,
        summary: format!(
            "{} of 5 steps decrease (≥4), final/first {:.3} (≤1/3)",
            table.decreases, table.final_ratio
        ),
        details,
    }
}

fn criterion_7() -> Outcome {
    let mut details = Vec::new();
    let tr = field("translate", 1, &[]);
    let x0 = 0.5;
    let spec = EnsembleSpec {
        s: 0.0,
        t: 1.0,
        dt: 1e-3,
        initials: InitialPoints::single(vec![x0]),
        replicas: 10_000,
        noise: NoiseMode::Independent,
        seed: 70,
    };
    let mut ratios = Vec::new();
    for w in [0.1, 0.05, 0.025] {
        let (lo, hi) = (x0 - w / 2.0, x0 + w / 2.0);
        let f = move |_t: f64, x: &[f64]| if x[0] >= lo && x[0] <= hi { 1.0 } else { 0.0 };
        let support = SupportBox {
            t0: 0.0,
            t1: 1.0,
            lo: vec![lo],
            hi: vec![hi],
        };
        let r = krylov_ratio(&tr, &f, Some(&support), 1.0, &spec).unwrap();
        details.push(format!(
            "slab width {w}: functional {:.5} ± {:.5}, norm {:.5}, ratio {:.4}",
            r.functional.mean, r.functional.stderr, r.norm, r.ratio
        ));
        ratios.push(r.ratio);
    }
    let base = ratios[0];
    let family_ok = ratios.iter().all(|r| *r <= 10.0 * base && *r >= base / 10.0);

    let f = |_t: f64, x: &[f64]| if x[0] >= 0.0 && x[0] <= 1.0 { 1.0 } else { 0.0 };
    let support = SupportBox {
        t0: 0.0,
        t1: 1.0,
        lo: vec![0.0],
        hi: vec![1.0],
    };
    let r = krylov_ratio(&tr, &f, Some(&support), 1.0, &spec).unwrap();
    let (ts, ws) = composite_legendre(0.0, 1.0, 64, 12);
    let exact: f64 = ts
        .iter()
        .zip(&ws)
        .map(|(t, w)| w * (-t).exp() * (normal_cdf((1.0 - x0) / t.sqrt()) - normal_cdf(-x0 / t.sqrt())))
        .sum();
    let z = (r.functional.mean - exact).abs() / r.functional.stderr;
    details.push(format!(
        "closed form x0=0.5, f=1[0,1]: MC {:.5} ± {:.5} vs {exact:.5} ({z:.2}σ)",
        r.functional.mean, r.functional.stderr
    ));
    Outcome {
        pass: family_ok && z <= 3.0,
        summary: format!(
            "ratios {:.3}/{:.3}/{:.3} within ×10 of {base:.3}; closed form {z:.2}σ (≤3)",
            ratios[0], ratios[1], ratios[2]
        ),
        details,
    }
}

fn criterion_8() -> Outcome {
    let mut details = Vec::new();
    let tr = field("translate", 1, &[]);
    let h = 0.05;
    let radius = (truncation_radius(1.0, 0.0, 1.0) / h).ceil() * h;
    let sol = fp_solve(
        &tr,
        &FPGrid::gaussian(1, radius, h).unwrap(),
        0.0,
        1.0,
        &FPOptions::default(),
    )
    .unwrap();
    let (_, var) = sol.last().moments();
    let heat_rel = (var - 2.0).abs() / 2.0;
    details.push(format!(
        "heat: variance {var:.6} vs 2 (relative {heat_rel:.2e}), mass audit {:.1e}",
        sol.mass_audit
    ));

    let mut weak_ok = true;
    for (name, f) in [
        ("translate", field("translate", 1, &[])),
        ("ou_linear", field("ou_linear", 1, &[("a", 1.0)])),
    ] {
        let h = 0.1;
        let radius = (truncation_radius(1.0, f.meta().growth, 1.0) / h).ceil() * h;
        let u0 = FPGrid::gaussian(1, radius, h).unwrap();
        let spec = EnsembleSpec {
            s: 0.0,
            t: 1.0,
            dt: 0.01,
            initials: InitialPoints::Sampled { count: 200_000 },
            replicas: 1,
            noise: NoiseMode::Independent,
            seed: 80,
        };
        let rep = weak_error(&f, &u0, &spec, &smooth_bump_set(1), &FPOptions::default()).unwrap();
        weak_ok &= rep.passed;
        for r in &rep.rows {
            details.push(format!(
                "{name} bump {}: FP {:.5}, MC {:.5} ± {:.1e}, discrepancy {:.1e} ≤ 3×{:.1e}: {}",
                r.test, r.fp, r.mc.mean, r.mc.stderr, r.discrepancy, r.bar, r.pass
            ));
        }
    }

    let h = 0.05;
    // 2R/h must split into bins of 4 cells.
    let radius = (truncation_radius(1.0, 0.0, 0.5) / (2.0 * h)).ceil() * 2.0 * h;
    let u0 = FPGrid::gaussian(1, radius, h).unwrap();
    let fp = fp_solve(&tr, &u0, 0.0, 0.5, &FPOptions::default()).unwrap();
    let spec = EnsembleSpec {
        s: 0.0,
        t: 0.5,
        dt: 0.05,
        initials: InitialPoints::Sampled { count: 1_000_000 },
        replicas: 1,
        noise: NoiseMode::Independent,
        seed: 81,
    };
    let ens = simulate_ensemble(&tr, &spec, false).unwrap();
    let initials: Vec<f64> = (0..ens.len()).flat_map(|i| ens.layout.initial(i).to_vec()).collect();
    let fac = density_factorization(&ens.finals, &initials, &ens.layout, |_| 1.0, &u0, fp.last(), 4, 100).unwrap();
    details.push(format!(
        "factorization, translate, 1e6 samples, t=0.5: L1 {:.4e} over all bins, {:.4e} over populated bins ({} low-count)",
        fac.l1, fac.l1_populated, fac.low_count_bins
    ));
    Outcome {
        pass: heat_rel <= 0.01 && weak_ok && fac.l1 <= 5e-2,
        summary: format!(
            "heat variance off by {:.2}% (≤1%), weak error {} (≤3 bars), factorization L1 {:.2e} (≤5e-2)",
            100.0 * heat_rel,
            if weak_ok { "within bars" } else { "outside bars" },
            fac.l1
        ),
        details,
    }
}

const DET_CONFIGS: &[(&str, &str)] = &[
    (
        "density_bound",
        r#"kind = "density_bound"
seed = 90
[field]
name = "ou_linear"
params = { a = 1.0 }
[density_bound]
t = 0.1
dt = 0.002
p = [1.5, 2.0]
replicas = 300
initials = { kind = "grid", order = 6 }
noise = "shared"
"#,
    ),
    (
        "coupling",
        r#"kind = "coupling"
seed = 91
[field]
name = "sign_drift"
[coupling]
t = 0.2
dt = 0.002
x0 = [0.0]
trajectories = 200
levels = [4, 8]
n_ref = 16
"#,
    ),
    (
        "fokker_planck",
        r#"kind = "fokker_planck"
seed = 92
[field]
name = "ou_linear"
[fokker_planck]
t = 0.3
h = 0.2
dt = 0.01
trajectories = 4000
"#,
    ),
    (
        "entropy_budget",
        r#"kind = "entropy_budget"
seed = 93
[field]
name = "sign_drift"
regularize = 8
[entropy_budget]
replicas = 500
steps = 8
"#,
    ),
    (
        "krylov",
        r#"kind = "krylov"
seed = 94
[field]
name = "translate"
[krylov]
t = 0.5
dt = 0.005
x0 = [0.2]
trajectories = 2000
lambda = 1.0
lo = [0.0]
hi = [0.5]
"#,
    ),
    (
        "oracle_suite",
        "kind = \"oracle_suite\"\nseed = 95\n[oracle_suite]\nmc_samples = 200000\n",
    ),
];

fn run_in_pool(cfg: &ExperimentConfig, threads: usize, dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let out = pool.install(|| run(cfg, dir)).unwrap();
    out.files
        .iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(p).unwrap(),
            )
        })
        .collect()
}

fn criterion_9() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    let mut files = 0;
    for (name, text) in DET_CONFIGS {
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let runs: Vec<Vec<(String, Vec<u8>)>> = [1usize, 4, 1]
            .iter()
            .map(|&t| {
                let dir = tempfile::tempdir().unwrap();
                run_in_pool(&cfg, t, dir.path())
            })
            .collect();
        let same = runs.windows(2).all(|w| w[0] == w[1]);
        files += runs[0].len();
        pass &= same;
        details.push(format!(
            "{name}: {} files byte-identical across 1, 4, 1 workers: {same}",
            runs[0].len()
        ));
    }
    Outcome {
        pass,
        summary: format!(
            "{} suites, {files} files identical across reruns and worker counts",
            DET_CONFIGS.len()
        ),
        details,
    }
}

fn main() {
    let started = Instant::now();
    let oracles = oracle_suite(1, 10_000_000).unwrap();
    let bad: Vec<_> = oracles.iter().filter(|o| !o.pass()).collect();
    println!(
        "oracle gate {}: {}/{} oracles agree with their recomputation",
        if bad.is_empty() { "PASS" } else { "FAIL" },
        oracles.len() - bad.len(),
        oracles.len()
    );
    for o in &oracles {
        println!(
            "    {}: {:.10} vs {:.10} (tol {:.1e})",
            o.name, o.closed_form, o.recomputed, o.tolerance
        );
    }
    let mut masses = MassLog::new();
    let mut all = bad.is_empty();
    let names = [
        "gaussian calculus",
        "translate oracle",
        "Lp bound ordering",
        "entropy budget",
        "mass identity",
        "coupling",
        "Krylov stability",
        "Fokker-Planck consistency",
        "determinism",
    ];
    // `FLOWDENS_CRITERIA=2,5` runs a subset.
    let only: Option<Vec<usize>> = std::env::var("FLOWDENS_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|c| c.trim().parse().ok()).collect());
    for (i, name) in names.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let t = Instant::now();
        let out = match i + 1 {
            1 => criterion_1(),
            2 => criterion_2(&mut masses),
            3 => criterion_3(&mut masses),
            4 => criterion_4(&mut masses),
            5 => criterion_5(&masses),
            6 => criterion_6(),
            7 => criterion_7(),
            8 => criterion_8(),
            _ => criterion_9(),
        };
        all &= out.pass;
        println!(
            "criterion {} {} {name}: {} [{:.1}s]",
            i + 1,
            if out.pass { "PASS" } else { "FAIL" },
            out.summary,
            t.elapsed().as_secs_f64()
        );
        for d in &out.details {
            println!("    {d}");
        }
    }
    println!(
        "acceptance {} in {:.1}s",
        if all { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    if !all {
        std::process::exit(1);
    }
}
