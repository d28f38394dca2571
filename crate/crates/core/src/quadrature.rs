//! One-dimensional node/weight routines.

use std::f64::consts::PI;

/// A one-dimensional rule for the standard normal law.
#[derive(Debug, Clone)]
pub struct HermiteRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub log_weights: Vec<f64>,
}

/// Gauss–Hermite rule of order `n` for `N(0, 1)`, nodes ascending.
///
/// Newton iteration on the orthonormal Hermite recurrence; the weights are
/// produced in log form first so the extreme ones keep full relative accuracy.
pub fn gauss_hermite(n: usize) -> HermiteRule {
    assert!(n >= 1, "Gauss-Hermite order must be positive");
    let nf = n as f64;
    let pim4 = PI.powf(-0.25);
    let half = n.div_ceil(2);
    // Roots of the physicists' polynomial, largest first.
    let mut roots = vec![0.0f64; n];
    let mut logw = vec![0.0f64; n];
    let mut z = 0.0f64;
    for i in 0..half {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * roots[0],
            3 => 1.91 * z - 0.91 * roots[1],
            _ => 2.0 * z - roots[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let (mut p1, mut p2) = (pim4, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        roots[i] = z;
        roots[n - 1 - i] = -z;
        // Physicists' weight 2 / pp^2, then divide by sqrt(pi) for N(0,1).
        let lw = 2f64.ln() - 2.0 * pp.abs().ln() - 0.5 * PI.ln();
        logw[i] = lw;
        logw[n - 1 - i] = lw;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| roots[a].total_cmp(&roots[b]));
    let nodes: Vec<f64> = idx.iter().map(|&i| roots[i] * 2f64.sqrt()).collect();
    let mut log_weights: Vec<f64> = idx.iter().map(|&i| logw[i]).collect();
    // Renormalise so the weights sum to one to rounding.
    let lse = crate::stats::log_sum_exp(&log_weights);
    for lw in &mut log_weights {
        *lw -= lse;
    }
    let weights = log_weights.iter().map(|l| l.exp()).collect();
    HermiteRule {
        nodes,
        weights,
        log_weights,
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, nodes ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Legendre order must be positive");
    let nf = n as f64;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= 1e-16 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * pp * pp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre on `[a, b]` with `panels` equal panels.
pub fn composite_legendre(a: f64, b: f64, panels: usize, order: usize) -> (Vec<f64>, Vec<f64>) {
    let (gx, gw) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut nodes = Vec::with_capacity(panels * order);
    let mut weights = Vec::with_capacity(panels * order);
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for (x, w) in gx.iter().zip(&gw) {
            nodes.push(lo + 0.5 * h * (x + 1.0));
            weights.push(0.5 * h * w);
        }
    }
    (nodes, weights)
}

/// `n` equally spaced points from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "linspace needs at least two points");
    let h = (b - a) / (n - 1) as f64;
    (0..n).map(|i| if i == n - 1 { b } else { a + i as f64 * h }).collect()
}

/// Composite Simpson weights for `nodes` equally spaced points on `[a, b]`.
/// `nodes` must be odd and at least 3.
pub fn simpson(a: f64, b: f64, nodes: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(nodes >= 3 && nodes % 2 == 1, "Simpson needs an odd node count");
    let h = (b - a) / (nodes - 1) as f64;
    let xs = (0..nodes).map(|i| a + i as f64 * h).collect();
    let ws = (0..nodes)
        .map(|i| {
            let c = if i == 0 || i == nodes - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect();
    (xs, ws)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn double_factorial(k: u32) -> f64 {
        (1..=k).rev().step_by(2).map(f64::from).product()
    }

    #[test]
    fn hermite_moments_exact_to_degree() {
        let rule = gauss_hermite(20);
        for k in 0..=39u32 {
            let m: f64 = rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(x, w)| w * x.powi(k as i32))
                .sum();
            let scale: f64 = rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(x, w)| w * x.abs().powi(k as i32))
                .sum();
            let exact = if k % 2 == 1 {
                0.0
            } else if k == 0 {
                1.0
            } else {
                double_factorial(k - 1)
            };
            assert!(
                (m - exact).abs() <= 1e-13 * scale.max(1.0),
                "moment {k}: {m} vs {exact}"
            );
        }
    }

    #[test]
    fn hermite_large_order_weights_are_accurate() {
        let rule = gauss_hermite(128);
        let s: f64 = rule.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-14);
        let m4: f64 = rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * x.powi(4)).sum();
        assert!((m4 - 3.0).abs() < 1e-11);
        assert!(rule.nodes.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(12);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(22)).sum();
        assert!((s - 2.0 / 23.0).abs() < 1e-14);
        let (x, w) = composite_legendre(0.0, 3.0, 7, 5);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.exp()).sum();
        assert!((s - (3f64.exp() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn simpson_exact_for_cubics() {
        let (x, w) = simpson(-1.0, 2.0, 9);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(3)).sum();
        assert!((s - (16.0 - 1.0) / 4.0).abs() < 1e-13);
    }
}
