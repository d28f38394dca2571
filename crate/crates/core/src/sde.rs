//! Brownian paths, Euler–Maruyama flows and ensemble drivers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientField, PointEval};
use crate::density::DensityRecord;
use crate::error::{Error, Result};
use crate::gaussian::GaussianQuadrature;
use crate::rng::{Domain, Stream};
use crate::stats::{batch_estimate, batch_log_estimate, fit_slope, log_sum_exp, mean, Estimate, LogEstimate};

/// Trajectories abort once `|X|` passes this.
pub const EXPLOSION_THRESHOLD: f64 = 1e8;

/// Uniform grid `start = t₀ < … < t_N = end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl TimeGrid {
    /// Grid with step `dt`, which must divide `end − start` to 1e-9 relative.
    pub fn new(start: f64, end: f64, dt: f64) -> Result<Self> {
        let span = end - start;
        if !(dt > 0.0) || !(span >= 0.0) || !span.is_finite() {
            return Err(Error::invalid(format!("bad grid [{start}, {end}] with dt {dt}")));
        }
        if dt > span && span > 0.0 {
            return Err(Error::invalid(format!("dt {dt} exceeds horizon {span}")));
        }
        let steps = (span / dt).round() as usize;
        if (steps as f64 * dt - span).abs() > 1e-9 * span.max(dt) {
            return Err(Error::invalid(format!("dt {dt} does not divide horizon {span}")));
        }
        Ok(TimeGrid { start, end, steps })
    }

    pub fn with_steps(start: f64, end: f64, steps: usize) -> Result<Self> {
        if !(end >= start) {
            return Err(Error::invalid("grid end precedes start"));
        }
        if steps == 0 && end > start {
            return Err(Error::invalid("a non-empty horizon needs at least one step"));
        }
        Ok(TimeGrid { start, end, steps })
    }

    pub fn dt(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            (self.end - self.start) / self.steps as f64
        }
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.end
        } else {
            self.start + k as f64 * self.dt()
        }
    }

    /// Index of the grid time closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        if self.steps == 0 {
            return 0;
        }
        (((t - self.start) / self.dt()).round().max(0.0) as usize).min(self.steps)
    }

    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps % factor != 0 {
            return Err(Error::invalid(format!(
                "cannot coarsen {} steps by {factor}",
                self.steps
            )));
        }
        Ok(TimeGrid {
            steps: self.steps / factor,
            ..*self
        })
    }
}

/// A discretised `m`-dimensional Brownian path.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    grid: TimeGrid,
    noise_dim: usize,
    increments: Vec<f64>,
    pub seed: u64,
    pub index: u64,
}

/// Draw a path from the counter-based stream `(seed, index)`.
pub fn sample_brownian(grid: TimeGrid, noise_dim: usize, seed: u64, index: u64) -> BrownianPath {
    let mut stream = Stream::new(seed, Domain::Noise, index);
    let mut increments = vec![0.0; grid.steps * noise_dim];
    stream.fill_normal(&mut increments);
    let scale = grid.dt().sqrt();
    for v in &mut increments {
        *v *= scale;
    }
    BrownianPath {
        grid,
        noise_dim,
        increments,
        seed,
        index,
    }
}

impl BrownianPath {
    pub fn from_increments(grid: TimeGrid, noise_dim: usize, increments: Vec<f64>) -> Result<Self> {
        if increments.len() != grid.steps * noise_dim {
            return Err(Error::invalid(
                "increment count does not match grid and noise dimension",
            ));
        }
        Ok(BrownianPath {
            grid,
            noise_dim,
            increments,
            seed: 0,
            index: 0,
        })
    }

    /// The degenerate path with all increments zero.
    pub fn zero(grid: TimeGrid, noise_dim: usize) -> Self {
        BrownianPath {
            grid,
            noise_dim,
            increments: vec![0.0; grid.steps * noise_dim],
            seed: 0,
            index: 0,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.noise_dim..(k + 1) * self.noise_dim]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `w_T − w_s`.
    pub fn total(&self) -> Vec<f64> {
        let m = self.noise_dim;
        (0..m)
            .map(|j| {
                let v: Vec<f64> = (0..self.grid.steps).map(|k| self.increments[k * m + j]).collect();
                crate::stats::pairwise_sum(&v)
            })
            .collect()
    }

    /// Sum groups of `factor` consecutive increments.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let m = self.noise_dim;
        let mut inc = vec![0.0; grid.steps * m];
        for k in 0..grid.steps {
            for f in 0..factor {
                for j in 0..m {
                    inc[k * m + j] += self.increments[(k * factor + f) * m + j];
                }
            }
        }
        Ok(BrownianPath {
            grid,
            noise_dim: m,
            increments: inc,
            seed: self.seed,
            index: self.index,
        })
    }

    /// The part of the path on steps `from..to`.
    pub fn slice(&self, from: usize, to: usize) -> Result<Self> {
        if from > to || to > self.grid.steps {
            return Err(Error::invalid("path slice out of range"));
        }
        let grid = TimeGrid {
            start: self.grid.time(from),
            end: self.grid.time(to),
            steps: to - from,
        };
        let m = self.noise_dim;
        Ok(BrownianPath {
            grid,
            noise_dim: m,
            increments: self.increments[from * m..to * m].to_vec(),
            seed: self.seed,
            index: self.index,
        })
    }
}

/// One Euler step as seen by an observer.
pub struct StepView<'a> {
    pub k: usize,
    pub t: f64,
    pub dt: f64,
    pub x: &'a [f64],
    pub next: &'a [f64],
    pub eval: &'a PointEval,
    pub dw: &'a [f64],
}

/// Hooks into the Euler loop.
pub trait PathObserver {
    fn needs_derivatives(&self) -> bool {
        false
    }

    fn start(&mut self, _t: f64, _x: &[f64]) {}

    fn step(&mut self, step: &StepView<'_>) -> Result<()>;
}

impl PathObserver for () {
    fn step(&mut self, _step: &StepView<'_>) -> Result<()> {
        Ok(())
    }
}

impl<A: PathObserver, B: PathObserver> PathObserver for (A, B) {
    fn needs_derivatives(&self) -> bool {
        self.0.needs_derivatives() || self.1.needs_derivatives()
    }

    fn start(&mut self, t: f64, x: &[f64]) {
        self.0.start(t, x);
        self.1.start(t, x);
    }

    fn step(&mut self, step: &StepView<'_>) -> Result<()> {
        self.0.step(step)?;
        self.1.step(step)
    }
}

/// Records every state, `(steps + 1) × d` row-major.
#[derive(Debug, Clone, Default)]
pub struct PathRecorder {
    pub states: Vec<f64>,
}

impl PathObserver for PathRecorder {
    fn start(&mut self, _t: f64, x: &[f64]) {
        self.states.clear();
        self.states.extend_from_slice(x);
    }

    fn step(&mut self, step: &StepView<'_>) -> Result<()> {
        self.states.extend_from_slice(step.next);
        Ok(())
    }
}

/// Euler–Maruyama with left-point coefficients, reporting each step to
/// `observer`. Returns the final state.
pub fn run_path<O: PathObserver + ?Sized>(
    field: &CoefficientField,
    x0: &[f64],
    path: &BrownianPath,
    trajectory: usize,
    observer: &mut O,
) -> Result<Vec<f64>> {
    let (d, m) = (field.dim(), field.noise_dim());
    if x0.len() != d || path.noise_dim() != m {
        return Err(Error::invalid(
            "initial point or path does not match the field dimensions",
        ));
    }
    let grid = *path.grid();
    let dt = grid.dt();
    let derivatives = observer.needs_derivatives();
    let mut x = x0.to_vec();
    let mut next = vec![0.0; d];
    let mut e = field.workspace();
    observer.start(grid.start, &x);
    for k in 0..grid.steps {
        let t = grid.time(k);
        field.evaluate(t, &x, &mut e, derivatives)?;
        let dw = path.increment(k);
        let mut norm_sq = 0.0;
        for i in 0..d {
            let mut v = x[i] + e.drift[i] * dt;
            for j in 0..m {
                v += e.sigma[i * m + j] * dw[j];
            }
            next[i] = v;
            norm_sq += v * v;
        }
        let norm = norm_sq.sqrt();
        if !(norm <= EXPLOSION_THRESHOLD) {
            return Err(Error::Explosion {
                trajectory,
                step: k + 1,
                norm,
            });
        }
        observer.step(&StepView {
            k,
            t,
            dt,
            x: &x,
            next: &next,
            eval: &e,
            dw,
        })?;
        std::mem::swap(&mut x, &mut next);
    }
    Ok(x)
}

/// A single trajectory on the path grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub dim: usize,
    pub states: Vec<f64>,
}

impl Trajectory {
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.grid.steps)
    }
}

/// `X_{k+1} = X_k + σ(t_k, X_k) Δw_k + b(t_k, X_k) dt`, `X_0 = x0`.
pub fn simulate(field: &CoefficientField, x0: &[f64], path: &BrownianPath) -> Result<Trajectory> {
    let mut rec = PathRecorder::default();
    run_path(field, x0, path, 0, &mut rec)?;
    Ok(Trajectory {
        grid: *path.grid(),
        dim: field.dim(),
        states: rec.states,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialPoints {
    /// `count` draws from `γ_d`, equal weights.
    Sampled {
        count: usize,
    },
    /// Tensor Gauss–Hermite nodes with their weights.
    Grid {
        order: usize,
    },
    Points {
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
}

impl InitialPoints {
    pub fn single(x: Vec<f64>) -> Self {
        InitialPoints::Points {
            points: vec![x],
            weights: vec![1.0],
        }
    }

    fn materialize(&self, d: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            InitialPoints::Sampled { count } => {
                if *count == 0 {
                    return Err(Error::EmptyEnsemble);
                }
                let mut pts = vec![0.0; count * d];
                for (i, p) in pts.chunks_mut(d).enumerate() {
                    Stream::new(seed, Domain::Initial, i as u64).fill_normal(p);
                }
                Ok((pts, vec![1.0 / *count as f64; *count]))
            }
            InitialPoints::Grid { order } => {
                let q = GaussianQuadrature::gauss_hermite(d, *order)?;
                let pts = (0..q.len()).flat_map(|i| q.node(i).to_vec()).collect();
                Ok((pts, q.weights().to_vec()))
            }
            InitialPoints::Points { points, weights } => {
                if points.is_empty() {
                    return Err(Error::EmptyEnsemble);
                }
                if points.len() != weights.len() || points.iter().any(|p| p.len() != d) {
                    return Err(Error::invalid("initial points and weights do not match"));
                }
                let total: f64 = weights.iter().sum();
                if !(total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
                    return Err(Error::invalid("initial weights must be non-negative with positive sum"));
                }
                Ok((
                    points.iter().flatten().copied().collect(),
                    weights.iter().map(|w| w / total).collect(),
                ))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Every trajectory has its own Brownian path.
    Independent,
    /// All initial points of a replica share one path.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub s: f64,
    pub t: f64,
    pub dt: f64,
    pub initials: InitialPoints,
    pub replicas: usize,
    pub noise: NoiseMode,
    pub seed: u64,
}

impl EnsembleSpec {
    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.s, self.t, self.dt)
    }
}

/// How trajectories map to initial points, replicas and noise streams.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleLayout {
    pub dim: usize,
    pub initials: Vec<f64>,
    pub initial_weights: Vec<f64>,
    pub replicas: usize,
    pub noise: NoiseMode,
}

impl EnsembleLayout {
    pub fn n_initial(&self) -> usize {
        self.initial_weights.len()
    }

    pub fn len(&self) -> usize {
        self.n_initial() * self.replicas
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn initial_index(&self, traj: usize) -> usize {
        traj % self.n_initial()
    }

    pub fn replica(&self, traj: usize) -> usize {
        traj / self.n_initial()
    }

    pub fn initial(&self, traj: usize) -> &[f64] {
        let i = self.initial_index(traj);
        &self.initials[i * self.dim..(i + 1) * self.dim]
    }

    /// Weight of a trajectory; all weights sum to one.
    pub fn weight(&self, traj: usize) -> f64 {
        self.initial_weights[self.initial_index(traj)] / self.replicas as f64
    }

    pub fn noise_index(&self, traj: usize) -> u64 {
        match self.noise {
            NoiseMode::Independent => traj as u64,
            NoiseMode::Shared => self.replica(traj) as u64,
        }
    }

    /// Number of independent observation units.
    pub fn groups(&self) -> usize {
        match self.noise {
            NoiseMode::Independent => self.len(),
            NoiseMode::Shared => self.replicas,
        }
    }

    pub fn group(&self, traj: usize) -> usize {
        match self.noise {
            NoiseMode::Independent => traj,
            NoiseMode::Shared => self.replica(traj),
        }
    }

    /// Independent observations `o_g = G Σ_{i∈g} ω_i v_i`, whose mean is the
    /// weighted ensemble mean `Σ ω_i v_i`.
    pub fn observations(&self, values: &[f64]) -> Vec<f64> {
        let g = self.groups();
        let mut out = vec![0.0; g];
        for (i, v) in values.iter().enumerate() {
            out[self.group(i)] += self.weight(i) * v;
        }
        let scale = g as f64;
        out.iter_mut().for_each(|o| *o *= scale);
        out
    }

    /// Log-space counterpart of [`observations`](Self::observations).
    pub fn log_observations(&self, log_values: &[f64]) -> Vec<f64> {
        let g = self.groups();
        let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); g];
        for (i, l) in log_values.iter().enumerate() {
            let w = self.weight(i);
            if w > 0.0 {
                buckets[self.group(i)].push(w.ln() + l);
            }
        }
        let shift = (g as f64).ln();
        buckets.iter().map(|b| shift + log_sum_exp(b)).collect()
    }

    pub fn estimate(&self, values: &[f64]) -> Estimate {
        batch_estimate(&self.observations(values))
    }

    pub fn log_estimate(&self, log_values: &[f64]) -> LogEstimate {
        batch_log_estimate(&self.log_observations(log_values))
    }
}

/// Build the layout for `spec` without simulating.
pub fn ensemble_layout(dim: usize, spec: &EnsembleSpec) -> Result<EnsembleLayout> {
    if spec.replicas == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let (initials, initial_weights) = spec.initials.materialize(dim, spec.seed)?;
    Ok(EnsembleLayout {
        dim,
        initials,
        initial_weights,
        replicas: spec.replicas,
        noise: spec.noise,
    })
}

/// Apply `f(trajectory, x0, path)` to every trajectory of `spec` in
/// parallel. Output order is trajectory order whatever the worker count.
pub fn map_ensemble<T, F>(field: &CoefficientField, spec: &EnsembleSpec, f: F) -> Result<(EnsembleLayout, Vec<T>)>
where
    T: Send,
    F: Fn(usize, &[f64], &BrownianPath) -> Result<T> + Sync,
{
    let grid = spec.grid()?;
    let layout = ensemble_layout(field.dim(), spec)?;
    let m = field.noise_dim();
    let results: Vec<Result<T>> = (0..layout.len())
        .into_par_iter()
        .map(|traj| {
            let path = sample_brownian(grid, m, spec.seed, layout.noise_index(traj));
            f(traj, layout.initial(traj), &path)
        })
        .collect();
    let mut out = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => out.push(v),
            Err(e) => failures.push((i, Box::new(e))),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Ensemble { failures });
    }
    Ok((layout, out))
}

/// Run every trajectory of `spec` with a fresh observer each.
pub fn run_ensemble<O, F>(
    field: &CoefficientField,
    spec: &EnsembleSpec,
    make_observer: F,
) -> Result<(EnsembleLayout, Vec<(Vec<f64>, O)>)>
where
    O: PathObserver + Send,
    F: Fn(usize) -> O + Sync,
{
    map_ensemble(field, spec, |traj, x0, path| {
        let mut obs = make_observer(traj);
        let x = run_path(field, x0, path, traj, &mut obs)?;
        Ok((x, obs))
    })
}

/// Simulated flow plus optional paths and density records.
#[derive(Debug, Clone)]
pub struct FlowEnsemble {
    pub layout: EnsembleLayout,
    pub grid: TimeGrid,
    pub finals: Vec<f64>,
    pub paths: Option<Vec<f64>>,
    pub records: Option<Vec<DensityRecord>>,
}

impl FlowEnsemble {
    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn final_state(&self, traj: usize) -> &[f64] {
        let d = self.dim();
        &self.finals[traj * d..(traj + 1) * d]
    }

    /// Stored path of a trajectory, `(steps + 1) × d`.
    pub fn path(&self, traj: usize) -> Option<&[f64]> {
        let stride = (self.grid.steps + 1) * self.dim();
        self.paths.as_ref().map(|p| &p[traj * stride..(traj + 1) * stride])
    }
}

/// Simulate the flow for every trajectory of `spec`.
pub fn simulate_ensemble(field: &CoefficientField, spec: &EnsembleSpec, store_paths: bool) -> Result<FlowEnsemble> {
    let grid = spec.grid()?;
    if store_paths {
        let (layout, runs) = run_ensemble(field, spec, |_| PathRecorder::default())?;
        let mut finals = Vec::with_capacity(runs.len() * field.dim());
        let mut paths = Vec::with_capacity(runs.len() * (grid.steps + 1) * field.dim());
        for (x, rec) in runs {
            finals.extend(x);
            paths.extend(rec.states);
        }
        Ok(FlowEnsemble {
            layout,
            grid,
            finals,
            paths: Some(paths),
            records: None,
        })
    } else {
        let (layout, runs) = run_ensemble(field, spec, |_| ())?;
        Ok(FlowEnsemble {
            layout,
            grid,
            finals: runs.into_iter().flat_map(|(x, _)| x).collect(),
            paths: None,
            records: None,
        })
    }
}

/// One row of the modulus table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulusRow {
    pub window: f64,
    pub steps: usize,
    pub increment_moment: Estimate,
    pub sup_moment: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulusTable {
    pub rows: Vec<ModulusRow>,
    /// Log-log slope of `E sup|X_u − X_v|⁴` against the window length.
    pub sup_exponent: f64,
    pub increment_exponent: f64,
    pub passed: bool,
}

/// Minimum trajectories for [`empirical_modulus`].
pub const MODULUS_MIN_TRAJECTORIES: usize = 1000;

/// `E sup_{u,v ∈ I} |X_u − X_v|⁴` over disjoint windows `I` of
/// 16, 32, …, 256 steps (as many as fit), with the fitted exponent.
pub fn empirical_modulus(ensemble: &FlowEnsemble) -> Result<ModulusTable> {
    let n = ensemble.len();
    if n < MODULUS_MIN_TRAJECTORIES {
        return Err(Error::TooFewTrajectories {
            needed: MODULUS_MIN_TRAJECTORIES,
            got: n,
        });
    }
    let paths = ensemble
        .paths
        .as_ref()
        .ok_or_else(|| Error::invalid("empirical modulus needs stored paths"))?;
    let d = ensemble.dim();
    let steps = ensemble.grid.steps;
    let stride = (steps + 1) * d;
    let dt = ensemble.grid.dt();
    let mut rows = Vec::new();
    let mut k = 16;
    while k <= 256 && k <= steps {
        let windows = steps / k;
        let mut inc = Vec::with_capacity(n);
        let mut sup = Vec::with_capacity(n);
        for traj in 0..n {
            let p = &paths[traj * stride..(traj + 1) * stride];
            let state = |i: usize| &p[i * d..(i + 1) * d];
            let (mut si, mut ss) = (0.0, 0.0);
            for w in 0..windows {
                let (a, b) = (w * k, (w + 1) * k);
                let dist = |u: &[f64], v: &[f64]| -> f64 {
                    u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
                };
                si += dist(state(a), state(b)).powi(4);
                let diam = if d == 1 {
                    let seg = &p[a..=b];
                    let hi = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lo = seg.iter().copied().fold(f64::INFINITY, f64::min);
                    hi - lo
                } else {
                    let mut best: f64 = 0.0;
                    for u in a..=b {
                        for v in u + 1..=b {
                            best = best.max(dist(state(u), state(v)));
                        }
                    }
                    best
                };
                ss += diam.powi(4);
            }
            inc.push(si / windows as f64);
            sup.push(ss / windows as f64);
        }
        rows.push(ModulusRow {
            window: k as f64 * dt,
            steps: k,
            increment_moment: ensemble.layout.estimate(&inc),
            sup_moment: ensemble.layout.estimate(&sup),
        });
        k *= 2;
    }
    if rows.len() < 2 {
        return Err(Error::invalid("need at least 32 steps for a modulus fit"));
    }
    let lx: Vec<f64> = rows.iter().map(|r| r.window.ln()).collect();
    let slope = |ys: Vec<f64>| {
        if ys.iter().all(|y| y.is_finite()) {
            fit_slope(&lx, &ys)
        } else {
            f64::NAN
        }
    };
    let sup_exponent = slope(rows.iter().map(|r| r.sup_moment.mean.ln()).collect());
    let increment_exponent = slope(rows.iter().map(|r| r.increment_moment.mean.ln()).collect());
    // A frozen flow has no modulus to fit and trivially satisfies the bound.
    let frozen = rows.iter().all(|r| r.sup_moment.mean == 0.0);
    Ok(ModulusTable {
        passed: frozen || sup_exponent >= 1.8,
        rows,
        sup_exponent,
        increment_exponent,
    })
}

/// `max_i |X_{s,u}(x_i) − X_{t,u}(X_{s,t}(x_i))|` with both legs on the same
/// path. `t` and `u` are snapped to the grid of `spec`.
pub fn flow_composition_check(field: &CoefficientField, t: f64, u: f64, spec: &EnsembleSpec) -> Result<f64> {
    let full = spec.grid()?;
    let kt = full.nearest_index(t);
    let ku = full.nearest_index(u);
    if kt > ku {
        return Err(Error::invalid("composition check needs s ≤ t ≤ u"));
    }
    let (_, devs) = map_ensemble(field, spec, |traj, x0, path| {
        let direct = run_path(field, x0, &path.slice(0, ku)?, traj, &mut ())?;
        let mid = run_path(field, x0, &path.slice(0, kt)?, traj, &mut ())?;
        let composed = run_path(field, &mid, &path.slice(kt, ku)?, traj, &mut ())?;
        Ok(direct
            .iter()
            .zip(&composed)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    })?;
    let mut worst: f64 = 0.0;
    for d in devs {
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Reference solution of `dX = −aX dt + dw` (d = 1) on `path` by the
/// exponential integrator `X_{k+1} = e^{−a dt}(X_k + Δw_k)`.
pub fn ou_reference(a: f64, x0: f64, path: &BrownianPath) -> Vec<f64> {
    let decay = (-a * path.grid().dt()).exp();
    let mut x = x0;
    let mut out = Vec::with_capacity(path.grid().steps + 1);
    out.push(x);
    for k in 0..path.grid().steps {
        x = decay * (x + path.increment(k)[0]);
        out.push(x);
    }
    out
}

/// Mean absolute endpoint error of Euler against [`ou_reference`] on a path
/// refined by `refine`, over `paths` independent paths.
pub fn ou_strong_error(
    field: &CoefficientField,
    a: f64,
    x0: f64,
    horizon: f64,
    dt: f64,
    refine: usize,
    paths: usize,
    seed: u64,
) -> Result<Estimate> {
    let fine = TimeGrid::new(0.0, horizon, dt / refine as f64)?;
    let errs: Vec<Result<f64>> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let p = sample_brownian(fine, 1, seed, i as u64);
            let reference = *ou_reference(a, x0, &p).last().expect("non-empty");
            let coarse = p.coarsen(refine)?;
            let x = run_path(field, &[x0], &coarse, i, &mut ())?;
            Ok((x[0] - reference).abs())
        })
        .collect();
    let errs: Result<Vec<f64>> = errs.into_iter().collect();
    Ok(batch_estimate(&errs?))
}

/// Sample mean of `Δw_k / √dt` and of its square over a path.
pub fn increment_moments(path: &BrownianPath) -> (f64, f64) {
    let s = path.grid().dt().sqrt();
    let z: Vec<f64> = path.increments().iter().map(|v| v / s).collect();
    let sq: Vec<f64> = z.iter().map(|v| v * v).collect();
    (mean(&z), mean(&sq))
}
