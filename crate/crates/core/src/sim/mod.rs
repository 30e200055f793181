//! Coupled Monte Carlo engine for the flow `X^x_{s,t}`, its variational process and
//! difference quotients.
//!
//! Time is discretised on the global lattice `kΔt`. Path `ω` draws `ΔW_k` from the
//! counter-based stream keyed by `(seed, ω, k)`, so every anchor active at step `k`
//! sees the same increment and any step can be regenerated on demand.

pub mod io;
pub mod rng;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::linalg::{dot, norm2, norm2_sq};
use crate::model::ModelSpec;
use rng::BrownianStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EulerMaruyama,
    #[default]
    TamedEuler,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExitPolicy {
    /// Keep the last in-domain state and mark the path.
    #[default]
    Freeze,
    /// As `Freeze`, but estimators drop the path.
    Reject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub s: f64,
    pub x: Vec<f64>,
}

impl Anchor {
    pub fn new(s: f64, x: Vec<f64>) -> Self {
        Self { s, x }
    }
}

/// A perturbation direction and the offsets `y` applied along it to every base anchor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub v: Vec<f64>,
    pub y_values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowGrid {
    pub anchors: Vec<Anchor>,
    pub directions: Vec<Direction>,
    pub time_step: f64,
    pub scheme: Scheme,
    pub n_paths: usize,
    pub record_times: Vec<f64>,
    pub exit_policy: ExitPolicy,
}

impl FlowGrid {
    pub fn new(anchors: Vec<Anchor>, time_step: f64, n_paths: usize, record_times: Vec<f64>) -> Self {
        Self {
            anchors,
            directions: Vec::new(),
            time_step,
            scheme: Scheme::default(),
            n_paths,
            record_times,
            exit_policy: ExitPolicy::default(),
        }
    }

    pub fn with_directions(mut self, directions: Vec<Direction>) -> Self {
        self.directions = directions;
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_exit_policy(mut self, policy: ExitPolicy) -> Self {
        self.exit_policy = policy;
        self
    }

    /// Record times `s + kΔt·spacing` up to and including `t_end`.
    pub fn uniform_record_times(s: f64, t_end: f64, dt: f64, spacing: usize) -> Vec<f64> {
        let step = dt * spacing.max(1) as f64;
        let n = ((t_end - s) / step + 1e-9).floor() as usize;
        let mut out: Vec<f64> = (1..=n).map(|k| s + k as f64 * step).collect();
        if out.last().is_none_or(|t| (t_end - t).abs() > 1e-9 * t_end.abs().max(1.0)) {
            out.push(t_end);
        }
        out
    }
}

/// Where an expanded anchor came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorOrigin {
    Base,
    Perturbed { base: usize, direction: usize, y: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimAnchor {
    pub s: f64,
    pub x: Vec<f64>,
    pub start_step: usize,
    pub origin: AnchorOrigin,
}

fn lattice_index(t: f64, dt: f64, what: &str) -> Result<usize> {
    let k = (t / dt).round();
    if t < 0.0 || (k * dt - t).abs() > 1e-9 * t.abs().max(dt) {
        return Err(FlowError::Grid(format!("{what} {t} is not a multiple of the time step {dt}")));
    }
    Ok(k as usize)
}

struct Plan {
    anchors: Vec<SimAnchor>,
    record_steps: Vec<usize>,
}

fn plan(model: &ModelSpec, grid: &FlowGrid) -> Result<Plan> {
    let d = model.dim_state;
    let dt = grid.time_step;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(FlowError::Grid(format!("time step must be positive, got {dt}")));
    }
    if grid.n_paths == 0 {
        return Err(FlowError::Grid("n_paths must be positive".into()));
    }
    if grid.anchors.is_empty() {
        return Err(FlowError::Grid("at least one anchor is required".into()));
    }
    if grid.record_times.is_empty() {
        return Err(FlowError::Grid("at least one record time is required".into()));
    }
    if grid.record_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FlowError::Grid("record times must be strictly increasing".into()));
    }
    let max_s = grid.anchors.iter().map(|a| a.s).fold(f64::NEG_INFINITY, f64::max);
    let horizon = model.horizon;
    for &t in &grid.record_times {
        if t < max_s || t > horizon * (1.0 + 1e-12) {
            return Err(FlowError::Grid(format!("record time {t} outside [{max_s}, {horizon}]")));
        }
    }
    let record_steps = grid
        .record_times
        .iter()
        .map(|&t| lattice_index(t, dt, "record time"))
        .collect::<Result<Vec<_>>>()?;

    let mut anchors = Vec::new();
    for a in &grid.anchors {
        if a.x.len() != d {
            return Err(FlowError::Grid(format!("anchor has dimension {} but the model has {d}", a.x.len())));
        }
        if !model.in_domain(&a.x) {
            return Err(FlowError::Domain { point: a.x.clone() });
        }
        anchors.push(SimAnchor {
            s: a.s,
            x: a.x.clone(),
            start_step: lattice_index(a.s, dt, "start time")?,
            origin: AnchorOrigin::Base,
        });
    }
    let n_base = anchors.len();
    for (j, dir) in grid.directions.iter().enumerate() {
        if dir.v.len() != d {
            return Err(FlowError::Grid(format!("direction has dimension {} but the model has {d}", dir.v.len())));
        }
        if dir.y_values.iter().any(|y| *y == 0.0 || !y.is_finite()) {
            return Err(FlowError::Grid("perturbation sizes must be finite and nonzero".into()));
        }
        for base in 0..n_base {
            for &y in &dir.y_values {
                let b = &anchors[base];
                let x: Vec<f64> = b.x.iter().zip(&dir.v).map(|(xi, vi)| xi + y * vi).collect();
                if !model.in_domain(&x) {
                    return Err(FlowError::Grid(format!("perturbed start {x:?} lies outside the domain")));
                }
                anchors.push(SimAnchor {
                    s: b.s,
                    x,
                    start_step: b.start_step,
                    origin: AnchorOrigin::Perturbed { base, direction: j, y },
                });
            }
        }
    }
    Ok(Plan { anchors, record_steps })
}

/// One explicit step of the chosen scheme with reusable buffers.
pub(crate) struct Stepper<'a> {
    model: &'a ModelSpec,
    scheme: Scheme,
    dt: f64,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    next: Vec<f64>,
    jac: Vec<f64>,
    sjac: Vec<f64>,
    jd: Vec<f64>,
    dnext: Vec<f64>,
}

/// Outcome of a single step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum StepOutcome {
    Moved,
    Exited,
    Nan,
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(model: &'a ModelSpec, scheme: Scheme, dt: f64) -> Self {
        let (d, m) = (model.dim_state, model.dim_noise);
        Self {
            model,
            scheme,
            dt,
            mu: vec![0.0; d],
            sigma: vec![0.0; d * m],
            next: vec![0.0; d],
            jac: vec![0.0; d * d],
            sjac: vec![0.0; d * m * d],
            jd: vec![0.0; d],
            dnext: vec![0.0; d],
        }
    }

    fn drift_factor(&self) -> f64 {
        match self.scheme {
            Scheme::EulerMaruyama => self.dt,
            Scheme::TamedEuler => self.dt / (1.0 + self.dt * norm2(&self.mu)),
        }
    }

    /// Advances `x` by one step; on exit or NaN `x` is left untouched.
    pub(crate) fn step(&mut self, x: &mut [f64], dw: &[f64]) -> StepOutcome {
        let m = self.model.dim_noise;
        (self.model.drift)(x, &mut self.mu);
        (self.model.diffusion)(x, &mut self.sigma);
        let f = self.drift_factor();
        for i in 0..x.len() {
            self.next[i] = x[i] + f * self.mu[i] + dot(&self.sigma[i * m..(i + 1) * m], dw);
        }
        self.commit(x)
    }

    fn commit(&mut self, x: &mut [f64]) -> StepOutcome {
        if self.next.iter().any(|v| v.is_nan()) {
            return StepOutcome::Nan;
        }
        if !self.model.in_domain(&self.next) {
            return StepOutcome::Exited;
        }
        x.copy_from_slice(&self.next);
        StepOutcome::Moved
    }

    /// Advances `(x, dx)` where `dx` is the derivative of the discrete flow along a
    /// direction: the exact Jacobian of the scheme's one-step map applied to `dx`.
    /// For Euler–Maruyama this is `dx + μ′(x)dx Δt + (σ′(x)dx)ΔW`.
    pub(crate) fn step_with_derivative(&mut self, x: &mut [f64], dx: &mut [f64], dw: &[f64]) -> StepOutcome {
        let (d, m) = (self.model.dim_state, self.model.dim_noise);
        (self.model.drift)(x, &mut self.mu);
        (self.model.diffusion)(x, &mut self.sigma);
        (self.model.drift_jacobian)(x, &mut self.jac);
        (self.model.diffusion_jacobian)(x, &mut self.sjac);
        crate::linalg::matvec(&self.jac, d, d, dx, &mut self.jd);
        let f = self.drift_factor();
        let taming_correction = match self.scheme {
            Scheme::EulerMaruyama => 0.0,
            Scheme::TamedEuler => {
                let n = norm2(&self.mu);
                if n > 0.0 {
                    let denom = 1.0 + self.dt * n;
                    self.dt * self.dt * dot(&self.mu, &self.jd) / (n * denom * denom)
                } else {
                    0.0
                }
            }
        };
        for i in 0..d {
            self.next[i] = x[i] + f * self.mu[i] + dot(&self.sigma[i * m..(i + 1) * m], dw);
            let mut noise = 0.0;
            for (k, dwk) in dw.iter().enumerate() {
                noise += dot(&self.sjac[(i * m + k) * d..(i * m + k + 1) * d], dx) * dwk;
            }
            self.dnext[i] = dx[i] + f * self.jd[i] - taming_correction * self.mu[i] + noise;
        }
        if self.dnext.iter().any(|v| v.is_nan()) {
            return StepOutcome::Nan;
        }
        let out = self.commit(x);
        if out == StepOutcome::Moved {
            dx.copy_from_slice(&self.dnext);
        }
        out
    }
}

/// Coupled trajectories at the record times for every (path, anchor).
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    pub seed: u64,
    pub scheme: Scheme,
    pub exit_policy: ExitPolicy,
    pub time_step: f64,
    pub dim_state: usize,
    pub dim_noise: usize,
    pub n_paths: usize,
    pub anchors: Vec<SimAnchor>,
    pub directions: Vec<Direction>,
    pub record_times: Vec<f64>,
    pub record_steps: Vec<usize>,
    /// Layout `[path][anchor][record][d]`.
    states: Vec<f64>,
    /// Layout `[path][anchor]`; `+∞` when the path never left the domain.
    exit_times: Vec<f64>,
}

impl PathEnsemble {
    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn n_record(&self) -> usize {
        self.record_times.len()
    }

    fn offset(&self, path: usize, anchor: usize, rec: usize) -> usize {
        ((path * self.anchors.len() + anchor) * self.record_times.len() + rec) * self.dim_state
    }

    pub fn state(&self, path: usize, anchor: usize, rec: usize) -> &[f64] {
        let o = self.offset(path, anchor, rec);
        &self.states[o..o + self.dim_state]
    }

    pub fn exit_time(&self, path: usize, anchor: usize) -> Option<f64> {
        let t = self.exit_times[path * self.anchors.len() + anchor];
        t.is_finite().then_some(t)
    }

    /// Whether estimators may use this (path, anchor) under the exit policy.
    pub fn usable(&self, path: usize, anchor: usize) -> bool {
        match self.exit_policy {
            ExitPolicy::Freeze => true,
            ExitPolicy::Reject => self.exit_time(path, anchor).is_none(),
        }
    }

    pub fn exit_fraction(&self, anchor: usize) -> f64 {
        let n = (0..self.n_paths).filter(|&p| self.exit_time(p, anchor).is_some()).count();
        n as f64 / self.n_paths as f64
    }

    /// Index of the record time equal to `t` (to lattice tolerance).
    pub fn record_index(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * t.abs().max(self.time_step);
        self.record_times.iter().position(|r| (r - t).abs() <= tol)
    }

    pub fn final_record(&self) -> usize {
        self.record_times.len() - 1
    }

    /// The anchor started at `base.x + y·v`, if it was simulated.
    pub fn perturbed_index(&self, base: usize, v: &[f64], y: f64) -> Option<usize> {
        self.anchors.iter().position(|a| match a.origin {
            AnchorOrigin::Perturbed { base: b, direction, y: yy } => {
                b == base && yy == y && same_direction(&self.directions[direction].v, v)
            }
            AnchorOrigin::Base => false,
        })
    }

    /// Samples of `X` at `(anchor, rec)` over usable paths.
    pub fn samples(&self, anchor: usize, rec: usize) -> Vec<&[f64]> {
        (0..self.n_paths).filter(|&p| self.usable(p, anchor)).map(|p| self.state(p, anchor, rec)).collect()
    }

    pub(crate) fn raw_states(&self) -> &[f64] {
        &self.states
    }

    pub(crate) fn raw_exit_times(&self) -> &[f64] {
        &self.exit_times
    }
}

fn same_direction(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-15 * (1.0 + x.abs()))
}

fn first_error(results: Vec<Result<()>>) -> Result<()> {
    results.into_iter().find(|r| r.is_err()).unwrap_or(Ok(()))
}

/// Simulates every anchor of `grid` on `grid.n_paths` coupled paths.
pub fn simulate_flow(model: &ModelSpec, grid: &FlowGrid, seed: u64) -> Result<PathEnsemble> {
    let plan = plan(model, grid)?;
    let (d, m) = (model.dim_state, model.dim_noise);
    let n_anchor = plan.anchors.len();
    let n_rec = plan.record_steps.len();
    let per_path = n_anchor * n_rec * d;
    let mut states = vec![0.0; grid.n_paths * per_path];
    let mut exit_times = vec![f64::INFINITY; grid.n_paths * n_anchor];
    let first_step = plan.anchors.iter().map(|a| a.start_step).min().unwrap_or(0);
    let last_step = *plan.record_steps.last().expect("record times checked nonempty");
    let dt = grid.time_step;

    let results: Vec<Result<()>> = states
        .par_chunks_mut(per_path)
        .zip(exit_times.par_chunks_mut(n_anchor))
        .enumerate()
        .map(|(path, (out, exits))| {
            let mut stepper = Stepper::new(model, grid.scheme, dt);
            let mut stream = BrownianStream::new(seed, path, m, dt, first_step);
            let mut cur: Vec<Vec<f64>> = plan.anchors.iter().map(|a| a.x.clone()).collect();
            let mut dw = vec![0.0; m];
            let mut rec = 0;
            for k in first_step..=last_step {
                while rec < n_rec && plan.record_steps[rec] == k {
                    for (a, x) in cur.iter().enumerate() {
                        let o = (a * n_rec + rec) * d;
                        out[o..o + d].copy_from_slice(x);
                    }
                    rec += 1;
                }
                if k == last_step {
                    break;
                }
                stream.next_increment(&mut dw);
                for (a, x) in cur.iter_mut().enumerate() {
                    if plan.anchors[a].start_step > k || exits[a].is_finite() {
                        continue;
                    }
                    match stepper.step(x, &dw) {
                        StepOutcome::Moved => {}
                        StepOutcome::Exited => exits[a] = (k + 1) as f64 * dt,
                        StepOutcome::Nan => return Err(FlowError::Simulation { anchor: a, path, step: k }),
                    }
                }
            }
            Ok(())
        })
        .collect();
    first_error(results)?;

    Ok(PathEnsemble {
        seed,
        scheme: grid.scheme,
        exit_policy: grid.exit_policy,
        time_step: dt,
        dim_state: d,
        dim_noise: m,
        n_paths: grid.n_paths,
        anchors: plan.anchors,
        directions: grid.directions.clone(),
        record_times: grid.record_times.clone(),
        record_steps: plan.record_steps,
        states,
        exit_times,
    })
}

/// Re-integrates one path of the discrete flow from `(start_step, x)` to `end_step`,
/// using the same Brownian increments as [`simulate_flow`]. Exits freeze the state.
pub fn replay_flow(
    model: &ModelSpec,
    scheme: Scheme,
    dt: f64,
    seed: u64,
    path: usize,
    start_step: usize,
    x: &[f64],
    end_step: usize,
) -> Result<Vec<f64>> {
    let m = model.dim_noise;
    let mut stepper = Stepper::new(model, scheme, dt);
    let mut stream = BrownianStream::new(seed, path, m, dt, start_step);
    let mut state = x.to_vec();
    let mut dw = vec![0.0; m];
    for k in start_step..end_step {
        stream.next_increment(&mut dw);
        match stepper.step(&mut state, &dw) {
            StepOutcome::Moved => {}
            StepOutcome::Exited => break,
            StepOutcome::Nan => return Err(FlowError::Simulation { anchor: 0, path, step: k }),
        }
    }
    Ok(state)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DerivativeMode {
    Variational,
    Quotient { y: f64 },
}

/// `D^v_{s,t}(x, y)` at the record times of an ensemble.
#[derive(Clone, Debug)]
pub struct DerivativeEnsemble {
    pub mode: DerivativeMode,
    pub anchor: usize,
    pub s: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub record_times: Vec<f64>,
    pub n_paths: usize,
    pub dim_state: usize,
    /// Layout `[path][record][d]`.
    values: Vec<f64>,
    usable: Vec<bool>,
}

impl DerivativeEnsemble {
    pub fn value(&self, path: usize, rec: usize) -> &[f64] {
        let o = (path * self.record_times.len() + rec) * self.dim_state;
        &self.values[o..o + self.dim_state]
    }

    pub fn usable(&self, path: usize) -> bool {
        self.usable[path]
    }

    pub fn samples(&self, rec: usize) -> Vec<&[f64]> {
        (0..self.n_paths).filter(|&p| self.usable[p]).map(|p| self.value(p, rec)).collect()
    }

    pub fn n_effective(&self) -> usize {
        self.usable.iter().filter(|u| **u).count()
    }
}

fn check_anchor(ensemble: &PathEnsemble, anchor: usize) -> Result<()> {
    if anchor >= ensemble.anchors.len() {
        return Err(FlowError::Config(format!("anchor {anchor} not in ensemble ({} anchors)", ensemble.anchors.len())));
    }
    Ok(())
}

/// Variational process along `v` for one anchor, replaying the anchor's paths from
/// the RNG keys: `D_{k+1} = D_k + μ′(X_k)D_kΔt + (σ′(X_k)D_k)ΔW_k` under Euler–Maruyama,
/// the derivative of the tamed step under tamed Euler.
pub fn simulate_variational(
    model: &ModelSpec,
    ensemble: &PathEnsemble,
    anchor: usize,
    v: &[f64],
) -> Result<DerivativeEnsemble> {
    check_anchor(ensemble, anchor)?;
    let (d, m) = (model.dim_state, model.dim_noise);
    if d != ensemble.dim_state || m != ensemble.dim_noise {
        return Err(FlowError::Config("model dimensions differ from the ensemble".into()));
    }
    if v.len() != d {
        return Err(FlowError::Config(format!("direction has dimension {} but the model has {d}", v.len())));
    }
    let a = &ensemble.anchors[anchor];
    let n_rec = ensemble.record_times.len();
    let dt = ensemble.time_step;
    let last_step = *ensemble.record_steps.last().expect("nonempty record steps");
    let mut values = vec![0.0; ensemble.n_paths * n_rec * d];
    let results: Vec<Result<()>> = values
        .par_chunks_mut(n_rec * d)
        .enumerate()
        .map(|(path, out)| {
            let mut stepper = Stepper::new(model, ensemble.scheme, dt);
            let mut stream = BrownianStream::new(ensemble.seed, path, m, dt, a.start_step);
            let mut x = a.x.clone();
            let mut dx = v.to_vec();
            let mut dw = vec![0.0; m];
            let mut rec = 0;
            let mut frozen = false;
            for k in a.start_step..=last_step {
                while rec < n_rec && ensemble.record_steps[rec] == k {
                    out[rec * d..(rec + 1) * d].copy_from_slice(&dx);
                    rec += 1;
                }
                if k == last_step {
                    break;
                }
                stream.next_increment(&mut dw);
                if frozen {
                    continue;
                }
                match stepper.step_with_derivative(&mut x, &mut dx, &dw) {
                    StepOutcome::Moved => {}
                    StepOutcome::Exited => frozen = true,
                    StepOutcome::Nan => return Err(FlowError::Simulation { anchor, path, step: k }),
                }
            }
            Ok(())
        })
        .collect();
    first_error(results)?;
    Ok(DerivativeEnsemble {
        mode: DerivativeMode::Variational,
        anchor,
        s: a.s,
        x: a.x.clone(),
        v: v.to_vec(),
        record_times: ensemble.record_times.clone(),
        n_paths: ensemble.n_paths,
        dim_state: d,
        values,
        usable: (0..ensemble.n_paths).map(|p| ensemble.usable(p, anchor)).collect(),
    })
}

/// `(X^{x+yv}_{s,t} − X^x_{s,t}) / y` per path and record time.
pub fn difference_quotient(ensemble: &PathEnsemble, anchor: usize, v: &[f64], y: f64) -> Result<DerivativeEnsemble> {
    check_anchor(ensemble, anchor)?;
    let pert = ensemble.perturbed_index(anchor, v, y).ok_or_else(|| {
        FlowError::Config(format!("no perturbed anchor for base {anchor}, direction {v:?}, y = {y}"))
    })?;
    let d = ensemble.dim_state;
    let n_rec = ensemble.record_times.len();
    let mut values = Vec::with_capacity(ensemble.n_paths * n_rec * d);
    for path in 0..ensemble.n_paths {
        for rec in 0..n_rec {
            let a = ensemble.state(path, anchor, rec);
            let b = ensemble.state(path, pert, rec);
            values.extend(a.iter().zip(b).map(|(xa, xb)| (xb - xa) / y));
        }
    }
    let base = &ensemble.anchors[anchor];
    Ok(DerivativeEnsemble {
        mode: DerivativeMode::Quotient { y },
        anchor,
        s: base.s,
        x: base.x.clone(),
        v: v.to_vec(),
        record_times: ensemble.record_times.clone(),
        n_paths: ensemble.n_paths,
        dim_state: d,
        values,
        usable: (0..ensemble.n_paths).map(|p| ensemble.usable(p, anchor) && ensemble.usable(p, pert)).collect(),
    })
}

/// Pathwise `L²(P)` distance between two derivative ensembles at a record index.
pub fn derivative_l2_distance(a: &DerivativeEnsemble, b: &DerivativeEnsemble, rec: usize) -> Result<f64> {
    if a.n_paths != b.n_paths || a.dim_state != b.dim_state {
        return Err(FlowError::Config("derivative ensembles have different shapes".into()));
    }
    let sq: Vec<f64> = (0..a.n_paths)
        .filter(|&p| a.usable(p) && b.usable(p))
        .map(|p| norm2_sq(&crate::linalg::sub(a.value(p, rec), b.value(p, rec))))
        .collect();
    if sq.is_empty() {
        return Err(FlowError::EmptySample);
    }
    Ok((crate::estimate::stats::tree_sum(&sq) / sq.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Lyapunov, ModelSpec};

    fn scalar(mu: fn(f64) -> f64, dmu: fn(f64) -> f64, sig: fn(f64) -> f64, dsig: fn(f64) -> f64) -> ModelSpec {
        ModelSpec::builder("scalar", 1, 1, 1.0)
            .drift(move |x, o| o[0] = mu(x[0]))
            .drift_jacobian(move |x, o| o[0] = dmu(x[0]))
            .diffusion(move |x, o| o[0] = sig(x[0]))
            .diffusion_jacobian(move |x, o| o[0] = dsig(x[0]))
            .v0(Lyapunov::scaled_square_norm(1.0))
            .build()
            .unwrap()
    }

    fn ou() -> ModelSpec {
        scalar(|x| -x, |_| -1.0, |_| 1.0, |_| 0.0)
    }

    fn gl() -> ModelSpec {
        scalar(|x| x - x * x * x, |x| 1.0 - 3.0 * x * x, |_| 0.5, |_| 0.0)
    }

    #[test]
    fn frozen_dynamics_keep_start() {
        let m = scalar(|_| 0.0, |_| 0.0, |_| 0.0, |_| 0.0);
        let grid = FlowGrid::new(vec![Anchor::new(0.0, vec![0.7])], 0.125, 5, vec![0.5, 1.0])
            .with_directions(vec![Direction { v: vec![1.0], y_values: vec![0.25] }]);
        let e = simulate_flow(&m, &grid, 1).unwrap();
        for p in 0..5 {
            assert_eq!(e.state(p, 0, 1), &[0.7]);
        }
        let q = difference_quotient(&e, 0, &[1.0], 0.25).unwrap();
        assert!(q.samples(1).iter().all(|v| (v[0] - 1.0).abs() < 1e-15));
    }

    #[test]
    fn ou_variational_is_deterministic_power() {
        let m = ou();
        let dt = 1.0 / 64.0;
        let grid = FlowGrid::new(vec![Anchor::new(0.0, vec![1.0])], dt, 16, vec![0.5, 1.0])
            .with_scheme(Scheme::EulerMaruyama);
        let e = simulate_flow(&m, &grid, 3).unwrap();
        let dv = simulate_variational(&m, &e, 0, &[1.0]).unwrap();
        let want = (1.0 - dt).powi(64);
        for p in 0..16 {
            assert!((dv.value(p, 1)[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_misalignment_is_rejected() {
        let m = ou();
        let grid = FlowGrid::new(vec![Anchor::new(0.05, vec![1.0])], 0.1, 4, vec![1.0]);
        assert!(matches!(simulate_flow(&m, &grid, 0), Err(FlowError::Grid(_))));
        let grid = FlowGrid::new(vec![Anchor::new(0.5, vec![1.0])], 0.1, 4, vec![0.3, 1.0]);
        assert!(matches!(simulate_flow(&m, &grid, 0), Err(FlowError::Grid(_))));
    }

    #[test]
    fn anchors_with_equal_start_share_noise() {
        // additive noise: the difference of two OU paths is deterministic
        let m = ou();
        let dt = 1.0 / 32.0;
        let grid = FlowGrid::new(vec![Anchor::new(0.25, vec![1.0]), Anchor::new(0.25, vec![-2.0])], dt, 8, vec![1.0])
            .with_scheme(Scheme::EulerMaruyama);
        let e = simulate_flow(&m, &grid, 9).unwrap();
        let want = 3.0 * (1.0 - dt).powi(24);
        for p in 0..8 {
            let diff = e.state(p, 0, 0)[0] - e.state(p, 1, 0)[0];
            assert!((diff - want).abs() < 1e-13);
        }
    }

    #[test]
    fn flow_property_holds_pathwise() {
        let m = gl();
        let dt = 1.0 / 128.0;
        let grid = FlowGrid::new(vec![Anchor::new(0.0, vec![0.3])], dt, 32, vec![0.375, 1.0]);
        let e = simulate_flow(&m, &grid, 21).unwrap();
        for p in 0..32 {
            let mid = e.state(p, 0, 0);
            let end = replay_flow(&m, e.scheme, dt, 21, p, 48, mid, 128).unwrap();
            assert_eq!(end.as_slice(), e.state(p, 0, 1));
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let m = gl();
        let grid = FlowGrid::new(vec![Anchor::new(0.0, vec![0.1]), Anchor::new(0.5, vec![-1.0])], 1.0 / 64.0, 64, vec![0.5, 1.0]);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| simulate_flow(&m, &grid, 5).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.raw_states(), b.raw_states());
    }

    #[test]
    fn exit_freezes_state_and_records_time() {
        let m = ModelSpec::builder("pos", 1, 1, 1.0)
            .drift(|_, o| o[0] = -10.0)
            .drift_jacobian(|_, o| o[0] = 0.0)
            .diffusion(|_, o| o[0] = 0.0)
            .diffusion_jacobian(|_, o| o[0] = 0.0)
            .domain(|x| x[0] > 0.0)
            .build()
            .unwrap();
        let grid = FlowGrid::new(vec![Anchor::new(0.0, vec![1.0])], 0.03125, 2, vec![1.0])
            .with_scheme(Scheme::EulerMaruyama)
            .with_exit_policy(ExitPolicy::Reject);
        let e = simulate_flow(&m, &grid, 0).unwrap();
        // 1 − 3·0.3125 = 0.0625 > 0, the fourth step would cross zero
        assert!((e.state(0, 0, 0)[0] - 0.0625).abs() < 1e-15);
        assert_eq!(e.exit_time(0, 0), Some(0.125));
        assert!(!e.usable(0, 0));
        assert_eq!(e.exit_fraction(0), 1.0);
    }

    #[test]
    fn nan_reports_location() {
        let m = ModelSpec::builder("nan", 1, 1, 1.0)
            .drift(|x, o| o[0] = if x[0] > 1.5 { f64::NAN } else { 1.0 })
            .drift_jacobian(|_, o| o[0] = 0.0)
            .diffusion(|_, o| o[0] = 0.0)
            .diffusion_jacobian(|_, o| o[0] = 0.0)
            .build()
            .unwrap();
        let grid = FlowGrid::new(vec![Anchor::new(0.0, vec![1.0])], 0.25, 3, vec![1.0]).with_scheme(Scheme::EulerMaruyama);
        match simulate_flow(&m, &grid, 0) {
            Err(FlowError::Simulation { anchor: 0, path: 0, step: 3 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tamed_derivative_matches_quotient() {
        let m = gl();
        let dt = 1.0 / 32.0;
        let grid = FlowGrid::new(vec![Anchor::new(0.0, vec![1.7])], dt, 16, vec![1.0])
            .with_directions(vec![Direction { v: vec![1.0], y_values: vec![1e-4, 1e-5] }]);
        let e = simulate_flow(&m, &grid, 2).unwrap();
        let dv = simulate_variational(&m, &e, 0, &[1.0]).unwrap();
        let d1 = derivative_l2_distance(&difference_quotient(&e, 0, &[1.0], 1e-4).unwrap(), &dv, 0).unwrap();
        let d2 = derivative_l2_distance(&difference_quotient(&e, 0, &[1.0], 1e-5).unwrap(), &dv, 0).unwrap();
        assert!(d2 < 0.2 * d1, "{d1} {d2}");
    }

    #[test]
    fn uniform_record_times_end_at_horizon() {
        let r = FlowGrid::uniform_record_times(0.0, 1.0, 0.125, 3);
        assert_eq!(r, vec![0.375, 0.75, 1.0]);
        let r = FlowGrid::uniform_record_times(0.5, 1.0, 0.125, 2);
        assert_eq!(r, vec![0.75, 1.0]);
    }
}
