//! Empirical left-hand sides versus closed-form right-hand sides.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{FlowError, Result};
use crate::estimate::stats::{
    self, bootstrap_log_mean_exp, bootstrap_replicates, exp_integral, log_mean_exp, power_mean_clt, quantile_sorted,
    ramp_exp_integral, Z99,
};
use crate::linalg::{self, norm2, norm2_sq};
use crate::model::{recip, AlphaReading, LyapunovIndex, ModelSpec};
use crate::numfmt::{de_f64, de_opt_f64, sci17, ser_f64, ser_opt_f64};
use crate::quadrature::trapezoid;
use crate::sim::{DerivativeEnsemble, PathEnsemble};

/// Values of `lhs` above this are reported through `log_lhs` only.
pub const OVERFLOW_THRESHOLD: f64 = 1e300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    Clt,
    Bootstrap,
    /// The left-hand side is a sample maximum.
    Max,
    /// Deterministic quantity, no sampling error.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// The bound asserts `lhs ≤ rhs`; satisfied iff the upper CI end is `≤ rhs`.
    Le,
    /// The check asserts `lhs ≥ rhs`; satisfied iff the lower CI end is `≥ rhs`.
    Ge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_id: String,
    #[serde(serialize_with = "ser_f64", deserialize_with = "de_f64")]
    pub lhs: f64,
    #[serde(serialize_with = "ser_f64", deserialize_with = "de_f64")]
    pub ci_lo: f64,
    #[serde(serialize_with = "ser_f64", deserialize_with = "de_f64")]
    pub ci_hi: f64,
    pub ci_method: CiMethod,
    #[serde(serialize_with = "ser_f64", deserialize_with = "de_f64")]
    pub rhs: f64,
    pub relation: Relation,
    pub satisfied: bool,
    pub n_effective: usize,
    #[serde(default, serialize_with = "ser_opt_f64", deserialize_with = "de_opt_f64")]
    pub log_lhs: Option<f64>,
    pub overflow: bool,
    /// One-sided 99% upper bound on `lhs − rhs` when the right side is itself estimated.
    #[serde(default, serialize_with = "ser_opt_f64", deserialize_with = "de_opt_f64")]
    pub slack_upper: Option<f64>,
    pub inputs: BTreeMap<String, Value>,
}

impl BoundReport {
    pub fn new(bound_id: &str, lhs: f64, ci: (f64, f64), method: CiMethod, rhs: f64, n: usize) -> Self {
        let mut r = Self {
            bound_id: bound_id.into(),
            lhs,
            ci_lo: ci.0,
            ci_hi: ci.1,
            ci_method: method,
            rhs,
            relation: Relation::Le,
            satisfied: false,
            n_effective: n,
            log_lhs: None,
            overflow: false,
            slack_upper: None,
            inputs: BTreeMap::new(),
        };
        r.refresh();
        r
    }

    /// Recomputes `satisfied` from the stored interval and flags.
    pub fn refresh(&mut self) {
        self.satisfied = !self.overflow
            && match (self.relation, self.slack_upper) {
                (Relation::Le, Some(s)) => s <= 0.0,
                (Relation::Le, None) => self.ci_hi <= self.rhs,
                (Relation::Ge, _) => self.ci_lo >= self.rhs,
            };
    }

    pub fn with_relation(mut self, relation: Relation) -> Self {
        self.relation = relation;
        self.refresh();
        self
    }

    pub fn num(mut self, key: &str, v: f64) -> Self {
        self.inputs.insert(key.into(), Value::String(sci17(v)));
        self
    }

    pub fn vec(mut self, key: &str, v: &[f64]) -> Self {
        self.inputs.insert(key.into(), Value::Array(v.iter().map(|x| Value::String(sci17(*x))).collect()));
        self
    }

    pub fn int(mut self, key: &str, v: usize) -> Self {
        self.inputs.insert(key.into(), Value::from(v as u64));
        self
    }

    pub fn text(mut self, key: &str, v: &str) -> Self {
        self.inputs.insert(key.into(), Value::String(v.into()));
        self
    }

    /// Marks the report as overflowed when `log_lhs` exceeds the representable range.
    fn with_log_lhs(mut self, log_lhs: f64) -> Self {
        self.log_lhs = Some(log_lhs);
        if log_lhs > OVERFLOW_THRESHOLD.ln() {
            self.lhs = f64::INFINITY;
            self.ci_hi = f64::INFINITY;
            self.overflow = true;
        }
        self.refresh();
        self
    }
}

fn check_indices(ens: &PathEnsemble, anchor: usize, rec: usize) -> Result<()> {
    if anchor >= ens.n_anchors() || rec >= ens.n_record() {
        return Err(FlowError::Config(format!(
            "anchor {anchor} / record {rec} out of range ({} anchors, {} record times)",
            ens.n_anchors(),
            ens.n_record()
        )));
    }
    Ok(())
}

fn alpha_reading(model: &ModelSpec) -> &'static str {
    match model.flags.alpha_unsubscripted {
        AlphaReading::PerIndex => "per_index",
        AlphaReading::Max => "max",
    }
}

fn index_name(i: LyapunovIndex) -> &'static str {
    match i {
        LyapunovIndex::V0 => "v0",
        LyapunovIndex::V1 => "v1",
    }
}

/// Mean of `V(X_t)` against `e^{α(t−s)} V(x)`.
pub fn check_lyapunov_bound(
    model: &ModelSpec,
    ens: &PathEnsemble,
    anchor: usize,
    rec: usize,
    which: LyapunovIndex,
    alpha: f64,
) -> Result<BoundReport> {
    check_indices(ens, anchor, rec)?;
    let a = &ens.anchors[anchor];
    let t = ens.record_times[rec];
    let vals = ens
        .samples(anchor, rec)
        .into_iter()
        .map(|x| model.eval_v(which, x))
        .collect::<Result<Vec<_>>>()?;
    let (m, var) = stats::mean_var(&vals)?;
    let half = Z99 * (var / vals.len() as f64).sqrt();
    let rhs = lyapunov_rhs(model, which, alpha, a.s, t, &a.x)?;
    Ok(BoundReport::new("lyapunov", m, (m - half, m + half), CiMethod::Clt, rhs, vals.len())
        .int("anchor", anchor)
        .text("which_v", index_name(which))
        .num("alpha", alpha)
        .num("s", a.s)
        .num("t", t)
        .vec("x", &a.x))
}

pub fn lyapunov_rhs(model: &ModelSpec, which: LyapunovIndex, alpha: f64, s: f64, t: f64, x: &[f64]) -> Result<f64> {
    Ok((alpha * (t - s)).exp() * model.eval_v(which, x)?)
}

/// Record nodes `(s, then every record time in (s, t_rec])`.
fn time_nodes(ens: &PathEnsemble, s: f64, rec: usize) -> (Vec<f64>, Vec<Option<usize>>) {
    let mut ts = vec![s];
    let mut idx = vec![None];
    for (j, &t) in ens.record_times[..=rec].iter().enumerate() {
        if t > s + 1e-12 * s.abs().max(1.0) {
            ts.push(t);
            idx.push(Some(j));
        }
    }
    (ts, idx)
}

/// Exponential moment estimate: `E exp(V(X_t)/e^{αt} + ∫_s^t V̄(r,X_r)/e^{αr} dr)`
/// against `exp(V(x)/e^{αs} + ∫_s^t β/e^{αr} dr)` with `(V, α, β) = (V_i, α_i, β_i)` and
/// `V̄` present only for `i = 1`.
pub fn check_exp_moment_bound(
    model: &ModelSpec,
    ens: &PathEnsemble,
    anchor: usize,
    rec: usize,
    which: LyapunovIndex,
) -> Result<BoundReport> {
    check_indices(ens, anchor, rec)?;
    let c = &model.constants;
    let (alpha, beta) = (c.alpha(which), c.beta(which));
    let a = &ens.anchors[anchor];
    let t = ens.record_times[rec];
    let (ts, idx) = time_nodes(ens, a.s, rec);
    let mut logs = Vec::with_capacity(ens.n_paths);
    for path in (0..ens.n_paths).filter(|&p| ens.usable(p, anchor)) {
        let xt = ens.state(path, anchor, rec);
        let mut ell = model.eval_v(which, xt)? / (alpha * t).exp();
        if which.is_v1() {
            let ys = ts
                .iter()
                .zip(&idx)
                .map(|(&r, j)| {
                    let x = j.map_or(a.x.as_slice(), |j| ens.state(path, anchor, j));
                    Ok(model.eval_vbar(r, x)? / (alpha * r).exp())
                })
                .collect::<Result<Vec<_>>>()?;
            ell += trapezoid(&ts, &ys);
        }
        logs.push(ell);
    }
    let log_lhs = log_mean_exp(&logs)?;
    let (lo, hi) = bootstrap_log_mean_exp(&logs, ens.seed)?;
    let rhs = exp_moment_rhs(model, which, a.s, t, &a.x)?;
    Ok(BoundReport::new("exp_moment", log_lhs.exp(), (lo.exp(), hi.exp()), CiMethod::Bootstrap, rhs, logs.len())
        .int("anchor", anchor)
        .text("which_v", index_name(which))
        .num("alpha", alpha)
        .num("beta", beta)
        .num("s", a.s)
        .num("t", t)
        .vec("x", &a.x)
        .with_log_lhs(log_lhs))
}

pub fn exp_moment_rhs(model: &ModelSpec, which: LyapunovIndex, s: f64, t: f64, x: &[f64]) -> Result<f64> {
    let c = &model.constants;
    let (alpha, beta) = (c.alpha(which), c.beta(which));
    Ok((model.eval_v(which, x)? / (alpha * s).exp() + beta * exp_integral(alpha, s, t)).exp())
}

/// `‖1 + V₀(X_t)‖_{L^r}` against `e^{α₀t}(r + ∫_s^t β₀e^{−α₀u}du + e^{−α₀s}V₀(x))`.
pub fn check_poly_moment_bound(
    model: &ModelSpec,
    ens: &PathEnsemble,
    anchor: usize,
    rec: usize,
    r_exp: f64,
) -> Result<BoundReport> {
    check_indices(ens, anchor, rec)?;
    if !(r_exp >= 1.0) {
        return Err(FlowError::Config(format!("moment exponent must be >= 1, got {r_exp}")));
    }
    let a = &ens.anchors[anchor];
    let t = ens.record_times[rec];
    let vals = ens
        .samples(anchor, rec)
        .into_iter()
        .map(|x| Ok(1.0 + model.eval_v(LyapunovIndex::V0, x)?))
        .collect::<Result<Vec<_>>>()?;
    let (lhs, lo, hi) = power_mean_clt(&vals, r_exp)?;
    let rhs = poly_moment_rhs(model, a.s, t, &a.x, r_exp)?;
    Ok(BoundReport::new("poly_moment", lhs, (lo, hi), CiMethod::Clt, rhs, vals.len())
        .int("anchor", anchor)
        .num("r_exp", r_exp)
        .num("s", a.s)
        .num("t", t)
        .vec("x", &a.x))
}

pub fn poly_moment_rhs(model: &ModelSpec, s: f64, t: f64, x: &[f64], r_exp: f64) -> Result<f64> {
    let c = &model.constants;
    let (alpha, beta) = (c.alpha0, c.beta0);
    let v = model.eval_v(LyapunovIndex::V0, x)?;
    Ok((alpha * t).exp() * (r_exp + beta * exp_integral(alpha, s, t) + (-alpha * s).exp() * v))
}

/// Four coupled processes started at the same time: the `L^q` norm of
/// `exp(∫_s^t φ + Σ_j [V₀(X^j)/(4q₀(t−s)e^{α₀r}) + V̄(r,X^j)/(4q₁e^{α₁r})] dr)` against the
/// product of the start-value factors.
pub fn check_multiple_exp_bound(
    model: &ModelSpec,
    ens: &PathEnsemble,
    anchors: [usize; 4],
    rec: usize,
) -> Result<BoundReport> {
    for &a in &anchors {
        check_indices(ens, a, rec)?;
    }
    let s = ens.anchors[anchors[0]].s;
    if anchors.iter().any(|&a| ens.anchors[a].s != s) {
        return Err(FlowError::Config("multiple_exp needs four anchors with a common start time".into()));
    }
    let t = ens.record_times[rec];
    let len = t - s;
    if len <= 0.0 {
        return Err(FlowError::Config("multiple_exp needs t > s".into()));
    }
    let c = &model.constants;
    let q = c.q;
    let (w0, w1) = (recip(c.q0) / (4.0 * len), recip(c.q1) / 4.0);
    let phi_int = model.phi.integral(s, t);
    let (ts, idx) = time_nodes(ens, s, rec);
    let paths: Vec<usize> = (0..ens.n_paths).filter(|&p| anchors.iter().all(|&a| ens.usable(p, a))).collect();
    let mut logs = Vec::with_capacity(paths.len());
    for &path in &paths {
        let mut ys = vec![0.0; ts.len()];
        for &a in &anchors {
            let start = &ens.anchors[a].x;
            for (k, (&r, j)) in ts.iter().zip(&idx).enumerate() {
                let x = j.map_or(start.as_slice(), |j| ens.state(path, a, j));
                if w0 > 0.0 {
                    ys[k] += w0 * model.eval_v(LyapunovIndex::V0, x)? / (c.alpha0 * r).exp();
                }
                if w1 > 0.0 {
                    ys[k] += w1 * model.eval_vbar(r, x)? / (c.alpha1 * r).exp();
                }
            }
        }
        logs.push(phi_int + trapezoid(&ts, &ys));
    }
    if logs.is_empty() {
        return Err(FlowError::EmptySample);
    }
    let starts: Vec<&[f64]> = anchors.iter().map(|&a| ens.anchors[a].x.as_slice()).collect();
    let rhs = multiple_exp_rhs(model, s, t, &starts)?;
    let (log_lhs, ci, method) = if q.is_infinite() {
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (m, (m.exp(), m.exp()), CiMethod::Max)
    } else {
        let scaled: Vec<f64> = logs.iter().map(|l| q * l).collect();
        let (lo, hi) = bootstrap_log_mean_exp(&scaled, ens.seed)?;
        (log_mean_exp(&scaled)? / q, ((lo / q).exp(), (hi / q).exp()), CiMethod::Bootstrap)
    };
    let mut report = BoundReport::new("multiple_exp", log_lhs.exp(), ci, method, rhs, logs.len())
        .num("s", s)
        .num("t", t)
        .num("q", q)
        .num("q0", c.q0)
        .num("q1", c.q1);
    for (j, x) in starts.iter().enumerate() {
        report = report.vec(&format!("x{}", j + 1), x);
    }
    Ok(report.with_log_lhs(log_lhs))
}

pub fn multiple_exp_rhs(model: &ModelSpec, s: f64, t: f64, starts: &[&[f64]]) -> Result<f64> {
    let c = &model.constants;
    let mut log = model.phi.integral(s, t)
        + c.beta0 * ramp_exp_integral(c.alpha0, s, t - s) * recip(c.q0)
        + c.beta1 * exp_integral(c.alpha1, s, t) * recip(c.q1);
    for i in [LyapunovIndex::V0, LyapunovIndex::V1] {
        let w = recip(c.q_index(i));
        if w == 0.0 {
            continue;
        }
        for x in starts {
            log += w * model.eval_v(i, x)? / (4.0 * (c.alpha(i) * s).exp());
        }
    }
    Ok(log.exp())
}

/// How the Gronwall rate `α_t` is extracted from the coupled pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GronwallAlpha {
    /// Smallest admissible rate: `max(0, LHS/‖Y‖²)` of the linear-growth inequality with `β = 0`.
    #[default]
    Tight,
    /// The monotonicity weight `φ(t) + Lyapunov terms` of the model.
    Hypothesis,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GronwallParams {
    pub p: f64,
    pub r: f64,
    pub delta: f64,
    #[serde(default)]
    pub alpha: GronwallAlpha,
}

impl GronwallParams {
    /// `q` with `1/q = 1/p + 1/r`.
    pub fn q(&self) -> f64 {
        1.0 / (1.0 / self.p + recip(self.r))
    }
}

/// Left side of the linear-growth inequality for `Y = X^x − X^y`, `a = μ(X^x) − μ(X^y)`,
/// `b = σ(X^x) − σ(X^y)`: `⟨Y,a⟩ + ½‖b‖² + (p−2)/2·‖⟨Y,b⟩‖²/‖Y‖²`.
pub fn gronwall_growth_lhs(model: &ModelSpec, p: f64, xa: &[f64], xb: &[f64]) -> Result<f64> {
    let y = linalg::sub(xa, xb);
    let yy = norm2_sq(&y);
    if yy == 0.0 {
        return Ok(0.0);
    }
    let a = linalg::sub(&model.eval_drift(xa)?, &model.eval_drift(xb)?);
    let b = linalg::sub(&model.eval_diffusion(xa)?, &model.eval_diffusion(xb)?);
    let inner = model.inner_with_state(&y, &b);
    Ok(linalg::dot(&y, &a) + 0.5 * norm2_sq(&b) + 0.5 * (p - 2.0) * norm2_sq(&inner) / yy)
}

/// Stochastic Gronwall bound for the difference of two coupled flows, one report per
/// record time after the common start `s`:
/// `‖Y_t‖_{L^q} ≤ ‖Y_s‖·‖exp(∫_s^t α_u du)‖_{L^q}·exp((½ − 1/p)(t−s)/δ)` with `β ≡ 0`.
pub fn check_gronwall(
    model: &ModelSpec,
    ens: &PathEnsemble,
    anchor_x: usize,
    anchor_y: usize,
    params: GronwallParams,
) -> Result<Vec<BoundReport>> {
    let last = ens.final_record();
    check_indices(ens, anchor_x, last)?;
    check_indices(ens, anchor_y, last)?;
    let GronwallParams { p, r, delta, alpha } = params;
    if !(p >= 2.0) || !(r > 0.0) || !(delta > 0.0) {
        return Err(FlowError::Config(format!("gronwall needs p >= 2, r > 0, delta > 0 (got {p}, {r}, {delta})")));
    }
    let q = params.q();
    let (ax, ay) = (&ens.anchors[anchor_x], &ens.anchors[anchor_y]);
    if ax.s != ay.s {
        return Err(FlowError::Config("gronwall pair must share the start time".into()));
    }
    let s = ax.s;
    let (ts, idx) = time_nodes(ens, s, last);
    let y0 = norm2(&linalg::sub(&ax.x, &ay.x));
    let paths: Vec<usize> = (0..ens.n_paths).filter(|&p| ens.usable(p, anchor_x) && ens.usable(p, anchor_y)).collect();
    if paths.is_empty() {
        return Err(FlowError::EmptySample);
    }
    // per path: ‖Y‖ and cumulative ∫α at every node
    let mut ynorm = vec![vec![0.0; ts.len()]; paths.len()];
    let mut cum_alpha = vec![vec![0.0; ts.len()]; paths.len()];
    for (pi, &path) in paths.iter().enumerate() {
        let mut prev = 0.0;
        for (k, (&t, j)) in ts.iter().zip(&idx).enumerate() {
            let (xa, xb) = match j {
                Some(j) => (ens.state(path, anchor_x, *j), ens.state(path, anchor_y, *j)),
                None => (ax.x.as_slice(), ay.x.as_slice()),
            };
            let yy = norm2_sq(&linalg::sub(xa, xb));
            let rate = match alpha {
                GronwallAlpha::Tight if yy > 0.0 => (gronwall_growth_lhs(model, p, xa, xb)? / yy).max(0.0),
                GronwallAlpha::Tight => 0.0,
                GronwallAlpha::Hypothesis => model.monotonicity_weight(t, xa, xb)?,
            };
            ynorm[pi][k] = yy.sqrt();
            if k > 0 {
                cum_alpha[pi][k] = cum_alpha[pi][k - 1] + 0.5 * (ts[k] - ts[k - 1]) * (prev + rate);
            }
            prev = rate;
        }
    }
    let mut reports = Vec::new();
    for k in 1..ts.len() {
        let t = ts[k];
        let ys: Vec<f64> = ynorm.iter().map(|v| v[k]).collect();
        let qa: Vec<f64> = cum_alpha.iter().map(|v| q * v[k]).collect();
        let (lhs, lo, hi) = power_mean_clt(&ys, q)?;
        let drift = (0.5 - 1.0 / p) * (t - s) / delta;
        let log_rhs = |sample: &[f64]| log_mean_exp(sample).map(|l| l / q);
        let rhs = y0 * (log_rhs(&qa)? + drift).exp();
        let reps = bootstrap_replicates(paths.len(), ens.seed, |ix| {
            let yb: Vec<f64> = ix.iter().map(|&i| ys[i]).collect();
            let ab: Vec<f64> = ix.iter().map(|&i| qa[i]).collect();
            let l = stats::power_mean(&yb, q).unwrap_or(f64::NAN);
            let rr = y0 * (log_rhs(&ab).unwrap_or(f64::NAN) + drift).exp();
            l - rr
        });
        let mut report = BoundReport::new("gronwall", lhs, (lo, hi), CiMethod::Bootstrap, rhs, paths.len())
            .int("anchor_x", anchor_x)
            .int("anchor_y", anchor_y)
            .num("p", p)
            .num("r", r)
            .num("q", q)
            .num("delta", delta)
            .num("s", s)
            .num("t", t)
            .text("alpha_mode", if alpha == GronwallAlpha::Tight { "tight" } else { "hypothesis" });
        report.slack_upper = Some(quantile_sorted(&reps, 0.99).max(lhs - rhs));
        report.refresh();
        reports.push(report);
    }
    Ok(reports)
}

/// A lattice point `(s, t, x)` of an ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowPoint {
    pub anchor: usize,
    pub rec: usize,
}

/// `∫_a^b φ(r) + Σ_i β_i/(q_i e^{α_i r}) dr`.
fn phi_beta_integral(model: &ModelSpec, a: f64, b: f64) -> f64 {
    let c = &model.constants;
    model.phi.integral(a, b)
        + c.beta0 * recip(c.q0) * exp_integral(c.alpha0, a, b)
        + c.beta1 * recip(c.q1) * exp_integral(c.alpha1, a, b)
}

/// Right side of the strong local Hölder estimate for `X^{x₁}_{s₁,t₁} − X^{x₂}_{s₂,t₂}`
/// with `s₁ ≤ s₂` (the arguments are swapped otherwise). Writing `r = pq/(p+q)`,
/// `c = max(1, c₁)`, `a` for the unsubscripted `α` and `I = ∫_0^T φ + Σβ_i/(q_ie^{α_i u}) du`:
///
/// ```text
///   c·√|t₁−t₂|·e^{aγT}·(rγ + e^{−a s₁}V₀(x₁))^γ·(√T + r)
/// + ‖x₁−x₂‖·exp(I + Σ_i (V_i(x₁)+V_i(x₂))/(2q_i))
/// + c·√(s₂−s₁)·e^{aγ(s₂−s₁)}·(pγ + V₀(x₂))^γ·(√(s₂−s₁) + p)
///     ·exp(I + Σ_i V_i(x₂)/(2q_i e^{a_i s₂}) + Σ_i V_i(x₂)/(2q_i e^{α_i s₁}))
/// ```
///
/// `a = α₀` and `a_i = α_i` under [`AlphaReading::PerIndex`]; `a = a_i = max(α₀, α₁)`
/// under [`AlphaReading::Max`].
pub fn flow_holder_rhs(model: &ModelSpec, p1: (f64, f64, &[f64]), p2: (f64, f64, &[f64])) -> Result<f64> {
    let ((s1, t1, x1), (s2, t2, x2)) = if p1.0 <= p2.0 { (p1, p2) } else { (p2, p1) };
    let c = &model.constants;
    let horizon = model.horizon;
    let r = c.moment_exponent();
    if r < 2.0 {
        return Err(FlowError::InvalidModel(format!("flow Hölder bound needs pq/(p+q) >= 2, got {r}")));
    }
    let (p, gamma) = (c.p, c.gamma);
    let scale = c.c1.max(1.0);
    let (a, a0, a1) = match model.flags.alpha_unsubscripted {
        AlphaReading::PerIndex => (c.alpha0, c.alpha0, c.alpha1),
        AlphaReading::Max => {
            let m = c.alpha0.max(c.alpha1);
            (m, m, m)
        }
    };
    let integral = phi_beta_integral(model, 0.0, horizon);
    let v = |i: LyapunovIndex, x: &[f64]| model.eval_v(i, x);
    let (w0, w1) = (recip(c.q0), recip(c.q1));

    let dt = (t1 - t2).abs();
    let term1 = if dt > 0.0 {
        scale
            * dt.sqrt()
            * (a * gamma * horizon).exp()
            * (r * gamma + (-a * s1).exp() * v(LyapunovIndex::V0, x1)?).powf(gamma)
            * (horizon.sqrt() + r)
    } else {
        0.0
    };

    let dx = norm2(&linalg::sub(x1, x2));
    let term2 = if dx > 0.0 {
        let lyap = w0 * (v(LyapunovIndex::V0, x1)? + v(LyapunovIndex::V0, x2)?) / 2.0
            + w1 * (v(LyapunovIndex::V1, x1)? + v(LyapunovIndex::V1, x2)?) / 2.0;
        dx * (integral + lyap).exp()
    } else {
        0.0
    };

    let ds = s2 - s1;
    let term3 = if ds > 0.0 {
        let v0 = v(LyapunovIndex::V0, x2)?;
        let v1 = v(LyapunovIndex::V1, x2)?;
        let lyap = w0 * v0 / (2.0 * (a0 * s2).exp())
            + w1 * v1 / (2.0 * (a1 * s2).exp())
            + w0 * v0 / (2.0 * (c.alpha0 * s1).exp())
            + w1 * v1 / (2.0 * (c.alpha1 * s1).exp());
        scale
            * ds.sqrt()
            * (a * gamma * ds).exp()
            * (p * gamma + v0).powf(gamma)
            * (ds.sqrt() + p)
            * (integral + lyap).exp()
    } else {
        0.0
    };
    Ok(term1 + term2 + term3)
}

/// `‖X^{x₁}_{s₁,t₁} − X^{x₂}_{s₂,t₂}‖_{L^{pq/(p+q)}}` against [`flow_holder_rhs`].
pub fn check_flow_holder(model: &ModelSpec, ens: &PathEnsemble, a: FlowPoint, b: FlowPoint) -> Result<BoundReport> {
    check_indices(ens, a.anchor, a.rec)?;
    check_indices(ens, b.anchor, b.rec)?;
    let r = model.constants.moment_exponent();
    let diffs: Vec<f64> = (0..ens.n_paths)
        .filter(|&p| ens.usable(p, a.anchor) && ens.usable(p, b.anchor))
        .map(|p| norm2(&linalg::sub(ens.state(p, a.anchor, a.rec), ens.state(p, b.anchor, b.rec))))
        .collect();
    let (lhs, lo, hi) = power_mean_clt(&diffs, r)?;
    let (aa, ab) = (&ens.anchors[a.anchor], &ens.anchors[b.anchor]);
    let (ta, tb) = (ens.record_times[a.rec], ens.record_times[b.rec]);
    let rhs = flow_holder_rhs(model, (aa.s, ta, &aa.x), (ab.s, tb, &ab.x))?;
    Ok(BoundReport::new("flow_holder", lhs, (lo, hi), CiMethod::Clt, rhs, diffs.len())
        .num("r", r)
        .num("s1", aa.s)
        .num("t1", ta)
        .vec("x1", &aa.x)
        .num("s2", ab.s)
        .num("t2", tb)
        .vec("x2", &ab.x)
        .text("alpha_unsubscripted", alpha_reading(model)))
}

/// `‖v‖·exp(∫_s^t φ + Σ_i β_i/(q_i e^{α_i r}) dr + Σ_i V_i(x)/(q_i e^{α_i s}))`.
pub fn derivative_moment_rhs(model: &ModelSpec, s: f64, t: f64, x: &[f64], v: &[f64]) -> Result<f64> {
    let c = &model.constants;
    let mut log = phi_beta_integral(model, s, t);
    for i in [LyapunovIndex::V0, LyapunovIndex::V1] {
        let w = recip(c.q_index(i));
        if w > 0.0 {
            log += w * model.eval_v(i, x)? / (c.alpha(i) * s).exp();
        }
    }
    Ok(norm2(v) * log.exp())
}

/// `‖D^v_{s,t}‖_{L^{pq/(p+q)}}` against [`derivative_moment_rhs`].
pub fn check_derivative_moment_bound(model: &ModelSpec, deriv: &DerivativeEnsemble, rec: usize) -> Result<BoundReport> {
    if rec >= deriv.record_times.len() {
        return Err(FlowError::Config(format!("record {rec} out of range")));
    }
    let r = model.constants.moment_exponent();
    let norms: Vec<f64> = deriv.samples(rec).into_iter().map(norm2).collect();
    let (lhs, lo, hi) = power_mean_clt(&norms, r)?;
    let t = deriv.record_times[rec];
    let rhs = derivative_moment_rhs(model, deriv.s, t, &deriv.x, &deriv.v)?;
    let mode = match deriv.mode {
        crate::sim::DerivativeMode::Variational => "variational".to_string(),
        crate::sim::DerivativeMode::Quotient { y } => format!("quotient(y={})", sci17(y)),
    };
    Ok(BoundReport::new("derivative_moment", lhs, (lo, hi), CiMethod::Clt, rhs, norms.len())
        .int("anchor", deriv.anchor)
        .text("mode", &mode)
        .num("r", r)
        .num("s", deriv.s)
        .num("t", t)
        .vec("x", &deriv.x)
        .vec("v", &deriv.v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Constants, Lyapunov, ModelSpec, Phi};
    use crate::sim::{simulate_flow, simulate_variational, Anchor, FlowGrid, Scheme};

    fn zero_model() -> ModelSpec {
        ModelSpec::builder("zero", 1, 1, 1.0)
            .drift(|_, o| o[0] = 0.0)
            .drift_jacobian(|_, o| o[0] = 0.0)
            .diffusion(|_, o| o[0] = 0.0)
            .diffusion_jacobian(|_, o| o[0] = 0.0)
            .v0(Lyapunov::scaled_square_norm(1.0))
            .build()
            .unwrap()
    }

    fn ou(sigma: f64) -> ModelSpec {
        ModelSpec::builder("ou", 1, 1, 1.0)
            .drift(|x, o| o[0] = -x[0])
            .drift_jacobian(|_, o| o[0] = -1.0)
            .diffusion(move |_, o| o[0] = sigma)
            .diffusion_jacobian(|_, o| o[0] = 0.0)
            .v0(Lyapunov::scaled_square_norm(1.0))
            .build()
            .unwrap()
    }

    fn run(model: &ModelSpec, anchors: Vec<Anchor>, n: usize, dt: f64, rec: Vec<f64>) -> PathEnsemble {
        let g = FlowGrid::new(anchors, dt, n, rec).with_scheme(Scheme::EulerMaruyama);
        simulate_flow(model, &g, 17).unwrap()
    }

    #[test]
    fn frozen_dynamics_meet_bounds_with_equality() {
        let m = zero_model();
        let e = run(&m, vec![Anchor::new(0.0, vec![1.5])], 50, 0.25, vec![0.5, 1.0]);
        let r = check_lyapunov_bound(&m, &e, 0, 1, LyapunovIndex::V0, 0.0).unwrap();
        assert_eq!(r.lhs, 2.25);
        assert_eq!(r.rhs, 2.25);
        assert!(r.satisfied);
        // V ≡ 0, β = 0 on the V1 leg: both sides equal 1
        let r = check_exp_moment_bound(&m, &e, 0, 1, LyapunovIndex::V1).unwrap();
        assert_eq!((r.lhs, r.rhs), (1.0, 1.0));
        assert!(r.satisfied);
        let r = check_poly_moment_bound(&m.with_lyapunov(LyapunovIndex::V0, Lyapunov::zero()), &e, 0, 1, 3.0).unwrap();
        assert_eq!((r.lhs, r.rhs), (1.0, 3.0));
    }

    #[test]
    fn lyapunov_bound_falsifiable() {
        let m = ou(1.0);
        let e = run(&m, vec![Anchor::new(0.0, vec![0.0])], 200, 1.0 / 64.0, vec![1.0]);
        let r = check_lyapunov_bound(&m, &e, 0, 0, LyapunovIndex::V0, 1.0).unwrap();
        assert_eq!(r.rhs, 0.0);
        assert!(!r.satisfied);
    }

    #[test]
    fn ou_lyapunov_matches_closed_form() {
        let m = ou(1.0);
        let e = run(&m, vec![Anchor::new(0.0, vec![1.0])], 20_000, 1.0 / 256.0, vec![1.0]);
        let r = check_lyapunov_bound(&m, &e, 0, 0, LyapunovIndex::V0, 1.0).unwrap();
        let exact = (-2.0f64).exp() + (1.0 - (-2.0f64).exp()) / 2.0;
        let se = (r.ci_hi - r.ci_lo) / (2.0 * Z99);
        assert!((r.lhs - exact).abs() < 4.0 * se + 3e-3, "{} vs {exact}", r.lhs);
        assert!(r.satisfied);
    }

    #[test]
    fn vbar_common_factor_leaves_flag() {
        // V1 ≡ 0 with V̄ ≡ β: both sides pick up exp(β(t−s))
        let mut c = Constants::default();
        c.beta1 = 0.7;
        let base = zero_model().with_constants(c).unwrap();
        let mut with_vbar = base.clone();
        with_vbar.vbar = std::sync::Arc::new(|_: f64, _: &[f64]| 0.7);
        let e = run(&base, vec![Anchor::new(0.0, vec![0.3])], 20, 0.125, vec![0.5, 1.0]);
        let a = check_exp_moment_bound(&base, &e, 0, 1, LyapunovIndex::V1).unwrap();
        let b = check_exp_moment_bound(&with_vbar, &e, 0, 1, LyapunovIndex::V1).unwrap();
        assert!((b.lhs - 0.7f64.exp()).abs() < 1e-12);
        assert!((b.rhs - 0.7f64.exp()).abs() < 1e-12);
        assert_eq!(a.satisfied, b.satisfied);
    }

    #[test]
    fn multiple_exp_without_lyapunov_is_phi_only() {
        let m = zero_model().with_phi(Phi::Constant(0.4)).unwrap();
        let e = run(&m, vec![Anchor::new(0.0, vec![0.3])], 10, 0.125, vec![1.0]);
        let r = check_multiple_exp_bound(&m, &e, [0; 4], 0).unwrap();
        assert!((r.lhs - 0.4f64.exp()).abs() < 1e-14);
        assert!((r.rhs - 0.4f64.exp()).abs() < 1e-14);
    }

    #[test]
    fn gronwall_ou_pair_closed_form() {
        let m = ou(1.0);
        let dt = 1.0 / 64.0;
        let e = run(&m, vec![Anchor::new(0.0, vec![1.0]), Anchor::new(0.0, vec![0.0])], 50, dt, FlowGrid::uniform_record_times(0.0, 1.0, dt, 8));
        let reports = check_gronwall(&m, &e, 0, 1, GronwallParams { p: 4.0, r: 8.0, delta: 1.0, alpha: GronwallAlpha::Tight }).unwrap();
        assert_eq!(reports.len(), 8);
        for (k, r) in reports.iter().enumerate() {
            let t = (k + 1) as f64 / 8.0;
            assert!((r.lhs - (1.0 - dt).powi(8 * (k as i32 + 1))).abs() < 1e-14);
            assert!((r.rhs - (t / 4.0).exp()).abs() < 1e-14);
            assert!(r.satisfied);
        }
    }

    #[test]
    fn derivative_bound_zero_direction() {
        let m = ou(1.0);
        let e = run(&m, vec![Anchor::new(0.0, vec![1.0])], 10, 0.125, vec![1.0]);
        let d = simulate_variational(&m, &e, 0, &[0.0]).unwrap();
        let r = check_derivative_moment_bound(&m, &d, 0).unwrap();
        assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
        assert!(r.satisfied);
    }

    #[test]
    fn holder_identical_points_and_spatial_pair() {
        let m = ou(1.0);
        let dt = 1.0 / 64.0;
        let e = run(&m, vec![Anchor::new(0.0, vec![1.0]), Anchor::new(0.0, vec![-0.5])], 30, dt, vec![1.0]);
        let same = check_flow_holder(&m, &e, FlowPoint { anchor: 0, rec: 0 }, FlowPoint { anchor: 0, rec: 0 }).unwrap();
        assert_eq!(same.lhs, 0.0);
        assert!(same.satisfied);
        let pair = check_flow_holder(&m, &e, FlowPoint { anchor: 0, rec: 0 }, FlowPoint { anchor: 1, rec: 0 }).unwrap();
        assert!((pair.lhs - 1.5 * (1.0 - dt).powi(64)).abs() < 1e-13);
        assert_eq!(pair.rhs, 1.5);
    }

    #[test]
    fn holder_rhs_symmetric_in_argument_order() {
        let mut c = Constants::default();
        c.p = 4.0;
        c.q = 12.0;
        c.q0 = 24.0;
        c.q1 = 24.0;
        c.alpha0 = 0.5;
        c.beta0 = 1.0;
        let m = ou(1.0).with_constants(c).unwrap();
        let a = flow_holder_rhs(&m, (0.1, 0.9, &[0.5]), (0.3, 0.6, &[1.0])).unwrap();
        let b = flow_holder_rhs(&m, (0.3, 0.6, &[1.0]), (0.1, 0.9, &[0.5])).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0 && a.is_finite());
    }

    #[test]
    fn report_json_roundtrip() {
        let r = BoundReport::new("lyapunov", 0.1, (0.05, 0.15), CiMethod::Clt, 1.0 / 3.0, 10).num("t", 0.5).vec("x", &[1.0]);
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"rhs\":\"3.3333333333333331e-1\""));
        let back: BoundReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}
