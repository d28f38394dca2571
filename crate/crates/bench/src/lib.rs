//! Fixtures shared by the kernel benchmarks.

use flowdens::coefficients::regularize;
use flowdens::{
    builtin_coefficients, CoefficientField, EnsembleSpec, FieldParams, InitialPoints, NoiseMode, ParamValue,
    RegularizationLevel,
};

pub fn field(name: &str, params: &[(&str, f64)]) -> CoefficientField {
    let mut p = FieldParams::new();
    for (k, v) in params {
        p.insert(k.to_string(), ParamValue::Scalar(*v));
    }
    builtin_coefficients(name, 1, &p).expect("catalog field")
}

pub fn ou() -> CoefficientField {
    field("ou_linear", &[("a", 1.0)])
}

/// `sign_drift` smoothed at level `n`.
pub fn regularized_sign(n: u32) -> CoefficientField {
    regularize(&field("sign_drift", &[]), RegularizationLevel::new(n).unwrap()).expect("regularize")
}

pub fn ensemble(trajectories: usize, t: f64, dt: f64) -> EnsembleSpec {
    EnsembleSpec {
        s: 0.0,
        t,
        dt,
        initials: InitialPoints::Sampled { count: trajectories },
        replicas: 1,
        noise: NoiseMode::Independent,
        seed: 11,
    }
}
