//! SDE model, Lyapunov structure and pointwise evaluation of the structural
//! hypotheses imposed on the coefficients.
//!
//! State space is `R^d`, noise space `R^m`. Matrices are stored row-major:
//!
//! * diffusion `σ(x)`: `d × m`, entry `(i, k)` at `i*m + k`;
//! * drift Jacobian `μ′(x)`: `d × d`, entry `(i, j)` at `i*d + j`;
//! * diffusion Jacobian `σ′(x)`: `d × m × d`, entry `∂σ_{ik}/∂x_j` at `(i*m + k)*d + j`,
//!   so that `σ′(x)·h` is the `d × m` matrix `Σ_j σ′[.., j] h_j`.
//!
//! Coefficient closures must be pure and reentrant; a [`ModelSpec`] is immutable
//! once built and is shared freely across threads.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::linalg::{self, dot, norm2, norm2_sq};
use crate::quadrature::gauss_legendre_unit;

pub type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type TimeScalarFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type Predicate = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// A `C²` Lyapunov function with its gradient and Hessian.
#[derive(Clone)]
pub struct Lyapunov {
    pub label: String,
    pub value: ScalarFn,
    pub gradient: VectorFn,
    pub hessian: VectorFn,
    zero: bool,
}

impl Lyapunov {
    pub fn new(label: impl Into<String>, value: ScalarFn, gradient: VectorFn, hessian: VectorFn) -> Self {
        Self { label: label.into(), value, gradient, hessian, zero: false }
    }

    pub fn zero() -> Self {
        Self {
            label: "0".into(),
            value: Arc::new(|_| 0.0),
            gradient: Arc::new(|_, g| g.iter_mut().for_each(|v| *v = 0.0)),
            hessian: Arc::new(|_, h| h.iter_mut().for_each(|v| *v = 0.0)),
            zero: true,
        }
    }

    /// `V(x) = scale·‖x‖²`.
    pub fn scaled_square_norm(scale: f64) -> Self {
        Self {
            label: format!("{scale}*|x|^2"),
            value: Arc::new(move |x| scale * norm2_sq(x)),
            gradient: Arc::new(move |x, g| {
                for (gi, xi) in g.iter_mut().zip(x) {
                    *gi = 2.0 * scale * xi;
                }
            }),
            hessian: Arc::new(move |x, h| {
                let d = x.len();
                h.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..d {
                    h[i * d + i] = 2.0 * scale;
                }
            }),
            zero: false,
        }
    }

    /// Constant function; gradient and Hessian vanish.
    pub fn constant(c: f64) -> Self {
        Self {
            label: format!("{c}"),
            value: Arc::new(move |_| c),
            gradient: Arc::new(|_, g| g.iter_mut().for_each(|v| *v = 0.0)),
            hessian: Arc::new(|_, h| h.iter_mut().for_each(|v| *v = 0.0)),
            zero: c == 0.0,
        }
    }

    /// `V + c`; same gradient and Hessian.
    pub fn shifted(&self, c: f64) -> Self {
        if c == 0.0 {
            return self.clone();
        }
        let value = self.value.clone();
        Self {
            label: format!("{} + {c}", self.label),
            value: Arc::new(move |x| value(x) + c),
            gradient: self.gradient.clone(),
            hessian: self.hessian.clone(),
            zero: false,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }
}

impl fmt::Debug for Lyapunov {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Lyapunov({})", self.label)
    }
}

/// The nonnegative integrable function `φ` of the monotonicity hypotheses.
#[derive(Clone)]
pub enum Phi {
    Constant(f64),
    /// `values[k]` on `[breaks[k], breaks[k+1])`; the last value extends to `+∞`.
    PiecewiseConstant { breaks: Vec<f64>, values: Vec<f64> },
    Function(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

/// Intervals used by the trapezoid fallback for general `φ`.
const PHI_TRAPEZOID_INTERVALS: usize = 4096;

impl Phi {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Phi::Constant(c) => *c,
            Phi::PiecewiseConstant { breaks, values } => {
                let k = breaks.partition_point(|b| *b <= t).saturating_sub(1);
                values[k]
            }
            Phi::Function(f) => f(t),
        }
    }

    /// `∫_a^b φ(r) dr`; exact for (piecewise) constants, trapezoid otherwise.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        match self {
            Phi::Constant(c) => c * (b - a),
            Phi::PiecewiseConstant { breaks, values } => {
                let mut total = 0.0;
                for k in 0..values.len() {
                    let lo = breaks[k].max(a);
                    let hi = breaks.get(k + 1).copied().unwrap_or(f64::INFINITY).min(b);
                    if hi > lo {
                        total += values[k] * (hi - lo);
                    }
                }
                total
            }
            Phi::Function(f) => {
                let n = PHI_TRAPEZOID_INTERVALS;
                let h = (b - a) / n as f64;
                let mut s = 0.5 * (f(a) + f(b));
                for k in 1..n {
                    s += f(a + k as f64 * h);
                }
                s * h
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Phi::Constant(c) => format!("{c}"),
            Phi::PiecewiseConstant { breaks, values } => format!("piecewise {breaks:?} -> {values:?}"),
            Phi::Function(_) => "user function".into(),
        }
    }
}

impl fmt::Debug for Phi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Phi({})", self.describe())
    }
}

/// Scalar constants of the hypothesis system. Extended reals use `f64::INFINITY`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub p: f64,
    #[serde(with = "crate::numfmt::ext_real")]
    pub q: f64,
    #[serde(with = "crate::numfmt::ext_real")]
    pub q0: f64,
    #[serde(with = "crate::numfmt::ext_real")]
    pub q1: f64,
    pub delta: f64,
    pub gamma: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self {
            alpha0: 0.0,
            alpha1: 0.0,
            beta0: 0.0,
            beta1: 0.0,
            p: 2.0,
            q: f64::INFINITY,
            q0: f64::INFINITY,
            q1: f64::INFINITY,
            delta: 0.5,
            gamma: 1.0,
            c1: 1.0,
            c2: 1.0,
            c3: 1.0,
        }
    }
}

/// `1/q` with `1/∞ = 0`.
pub fn recip(q: f64) -> f64 {
    if q.is_infinite() { 0.0 } else { 1.0 / q }
}

/// `pq/(p+q)`, equal to `p` when `q = ∞`.
pub fn harmonic_exponent(p: f64, q: f64) -> f64 {
    if q.is_infinite() { p } else { p * q / (p + q) }
}

impl Constants {
    /// The integrability exponent `pq/(p+q)`.
    pub fn moment_exponent(&self) -> f64 {
        harmonic_exponent(self.p, self.q)
    }

    pub fn alpha(&self, i: LyapunovIndex) -> f64 {
        match i {
            LyapunovIndex::V0 => self.alpha0,
            LyapunovIndex::V1 => self.alpha1,
        }
    }

    pub fn beta(&self, i: LyapunovIndex) -> f64 {
        match i {
            LyapunovIndex::V0 => self.beta0,
            LyapunovIndex::V1 => self.beta1,
        }
    }

    pub fn q_index(&self, i: LyapunovIndex) -> f64 {
        match i {
            LyapunovIndex::V0 => self.q0,
            LyapunovIndex::V1 => self.q1,
        }
    }

    pub fn validate(&self, dim_state: usize) -> Result<()> {
        let bad = |m: String| Err(FlowError::InvalidModel(m));
        let c = self;
        for (name, v) in [
            ("alpha0", c.alpha0),
            ("alpha1", c.alpha1),
            ("beta0", c.beta0),
            ("beta1", c.beta1),
            ("p", c.p),
            ("delta", c.delta),
            ("gamma", c.gamma),
            ("c1", c.c1),
            ("c2", c.c2),
            ("c3", c.c3),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite, got {v}"));
            }
        }
        if c.alpha0 < 0.0 || c.alpha1 < 0.0 {
            return bad("alpha0 and alpha1 must be >= 0".into());
        }
        if c.p < 2.0 {
            return bad(format!("p must be >= 2, got {}", c.p));
        }
        if !(c.q > 2.0 * c.p) {
            return bad(format!("q must lie in (2p, inf], got q={} with p={}", c.q, c.p));
        }
        if !(c.q0 > 0.0 && c.q1 > 0.0) {
            return bad("q0 and q1 must be positive".into());
        }
        let lhs = recip(c.q0) + recip(c.q1);
        let rhs = recip(c.q);
        if (lhs - rhs).abs() > 1e-12 * rhs.max(lhs) {
            return bad(format!("1/q0 + 1/q1 = {lhs} differs from 1/q = {rhs}"));
        }
        if c.delta <= 0.0 || c.gamma <= 0.0 {
            return bad("delta and gamma must be > 0".into());
        }
        let r = c.moment_exponent();
        if r < 1.0 / c.gamma {
            return bad(format!("pq/(p+q) = {r} must be >= 1/gamma = {}", 1.0 / c.gamma));
        }
        let _ = dim_state;
        Ok(())
    }
}

/// Which time-weighting the monotonicity right-hand side uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HorizonWeighting {
    /// Divide the `V₀` term by `T`.
    #[default]
    Total,
    /// Divide both Lyapunov terms by `T − t`.
    Remaining,
}

/// How an unsubscripted `α` in the Hölder bound is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlphaReading {
    /// `α` next to `V_i` is `α_i`; next to `V₀` alone it is `α₀`.
    #[default]
    PerIndex,
    /// `α = max(α₀, α₁)` everywhere it appears unsubscripted.
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    #[serde(default)]
    pub horizon: HorizonWeighting,
    #[serde(default)]
    pub alpha_unsubscripted: AlphaReading,
    #[serde(default = "default_nodes")]
    pub quadrature_nodes: usize,
}

fn default_nodes() -> usize {
    8
}

impl Default for Flags {
    fn default() -> Self {
        Self { horizon: HorizonWeighting::Total, alpha_unsubscripted: AlphaReading::PerIndex, quadrature_nodes: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LyapunovIndex {
    V0,
    V1,
}

impl LyapunovIndex {
    pub fn is_v1(self) -> bool {
        matches!(self, LyapunovIndex::V1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JacobianKind {
    Drift,
    Diffusion,
}

/// The three growth margins at a pair of points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrowthMargins {
    pub coeff_growth: f64,
    pub jacobian_growth: f64,
    pub jacobian_lipschitz: f64,
}

/// The three quadratic forms on the left of the C¹ monotonicity hypothesis,
/// evaluated with the λ-averaged Jacobians `A = ∫μ′`, `B = ∫σ′`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonotonicityTerms {
    /// `⟨h, A h⟩`
    pub drift_form: f64,
    /// `‖B h‖²_HS`
    pub diffusion_hs: f64,
    /// `‖⟨h, B h⟩‖²`
    pub diffusion_inner: f64,
}

/// An SDE `dX = μ(X)dt + σ(X)dW` on `R^d` with its hypothesis data.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub dim_state: usize,
    pub dim_noise: usize,
    pub horizon: f64,
    pub drift: VectorFn,
    pub diffusion: VectorFn,
    pub drift_jacobian: VectorFn,
    pub diffusion_jacobian: VectorFn,
    pub domain_open: Predicate,
    pub domain: Predicate,
    pub v0: Lyapunov,
    pub v1: Lyapunov,
    pub vbar: TimeScalarFn,
    pub phi: Phi,
    pub constants: Constants,
    pub flags: Flags,
    gl_nodes: Arc<(Vec<f64>, Vec<f64>)>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("horizon", &self.horizon)
            .field("v0", &self.v0)
            .field("v1", &self.v1)
            .field("phi", &self.phi)
            .field("constants", &self.constants)
            .field("flags", &self.flags)
            .finish()
    }
}

/// Builder for [`ModelSpec`]; coefficient functions and Jacobians are mandatory.
pub struct ModelBuilder {
    name: String,
    dim_state: usize,
    dim_noise: usize,
    horizon: f64,
    drift: Option<VectorFn>,
    diffusion: Option<VectorFn>,
    drift_jacobian: Option<VectorFn>,
    diffusion_jacobian: Option<VectorFn>,
    domain_open: Option<Predicate>,
    domain: Option<Predicate>,
    v0: Lyapunov,
    v1: Lyapunov,
    vbar: Option<TimeScalarFn>,
    phi: Phi,
    constants: Constants,
    flags: Flags,
}

fn all_finite() -> Predicate {
    Arc::new(|x: &[f64]| x.iter().all(|v| v.is_finite()))
}

impl ModelBuilder {
    pub fn drift(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }
    pub fn diffusion(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion = Some(Arc::new(f));
        self
    }
    pub fn drift_jacobian(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift_jacobian = Some(Arc::new(f));
        self
    }
    pub fn diffusion_jacobian(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion_jacobian = Some(Arc::new(f));
        self
    }
    pub fn domain_open(mut self, f: impl Fn(&[f64]) -> bool + Send + Sync + 'static) -> Self {
        self.domain_open = Some(Arc::new(f));
        self
    }
    /// Membership in the convex set on which flows live.
    pub fn domain(mut self, f: impl Fn(&[f64]) -> bool + Send + Sync + 'static) -> Self {
        self.domain = Some(Arc::new(f));
        self
    }
    pub fn v0(mut self, v: Lyapunov) -> Self {
        self.v0 = v;
        self
    }
    pub fn v1(mut self, v: Lyapunov) -> Self {
        self.v1 = v;
        self
    }
    pub fn vbar(mut self, f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.vbar = Some(Arc::new(f));
        self
    }
    pub fn phi(mut self, phi: Phi) -> Self {
        self.phi = phi;
        self
    }
    pub fn constants(mut self, c: Constants) -> Self {
        self.constants = c;
        self
    }
    pub fn flags(mut self, f: Flags) -> Self {
        self.flags = f;
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        let missing = |what: &str| FlowError::InvalidModel(format!("{what} not supplied"));
        if self.dim_state == 0 || self.dim_noise == 0 {
            return Err(FlowError::InvalidModel("dimensions must be positive".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(FlowError::InvalidModel(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.flags.quadrature_nodes == 0 {
            return Err(FlowError::InvalidModel("quadrature_nodes must be >= 1".into()));
        }
        validate_phi(&self.phi)?;
        self.constants.validate(self.dim_state)?;
        let gl = gauss_legendre_unit(self.flags.quadrature_nodes);
        Ok(ModelSpec {
            name: self.name,
            dim_state: self.dim_state,
            dim_noise: self.dim_noise,
            horizon: self.horizon,
            drift: self.drift.ok_or_else(|| missing("drift"))?,
            diffusion: self.diffusion.ok_or_else(|| missing("diffusion"))?,
            drift_jacobian: self.drift_jacobian.ok_or_else(|| missing("drift_jacobian"))?,
            diffusion_jacobian: self.diffusion_jacobian.ok_or_else(|| missing("diffusion_jacobian"))?,
            domain_open: self.domain_open.unwrap_or_else(all_finite),
            domain: self.domain.unwrap_or_else(all_finite),
            v0: self.v0,
            v1: self.v1,
            vbar: self.vbar.unwrap_or_else(|| Arc::new(|_, _| 0.0)),
            phi: self.phi,
            constants: self.constants,
            flags: self.flags,
            gl_nodes: Arc::new(gl),
        })
    }
}

fn validate_phi(phi: &Phi) -> Result<()> {
    match phi {
        Phi::Constant(c) if !(*c >= 0.0 && c.is_finite()) => {
            Err(FlowError::InvalidModel(format!("phi must be finite and >= 0, got {c}")))
        }
        Phi::PiecewiseConstant { breaks, values } => {
            if breaks.is_empty() || breaks.len() != values.len() || breaks[0] != 0.0 {
                return Err(FlowError::InvalidModel("piecewise phi needs breaks starting at 0, one value per break".into()));
            }
            if breaks.windows(2).any(|w| w[1] <= w[0]) || values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(FlowError::InvalidModel("piecewise phi: breaks must increase, values finite and >= 0".into()));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn check_finite(what: &'static str, x: &[f64], vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FlowError::Evaluation { what, point: x.to_vec() })
    }
}

fn finite_scalar(what: &'static str, x: &[f64], v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FlowError::Evaluation { what, point: x.to_vec() })
    }
}

impl ModelSpec {
    pub fn builder(name: impl Into<String>, dim_state: usize, dim_noise: usize, horizon: f64) -> ModelBuilder {
        ModelBuilder {
            name: name.into(),
            dim_state,
            dim_noise,
            horizon,
            drift: None,
            diffusion: None,
            drift_jacobian: None,
            diffusion_jacobian: None,
            domain_open: None,
            domain: None,
            v0: Lyapunov::zero(),
            v1: Lyapunov::zero(),
            vbar: None,
            phi: Phi::Constant(0.0),
            constants: Constants::default(),
            flags: Flags::default(),
        }
    }

    /// Same model with different constants, revalidated.
    pub fn with_constants(&self, c: Constants) -> Result<ModelSpec> {
        c.validate(self.dim_state)?;
        let mut m = self.clone();
        m.constants = c;
        Ok(m)
    }

    pub fn with_flags(&self, flags: Flags) -> Result<ModelSpec> {
        if flags.quadrature_nodes == 0 {
            return Err(FlowError::InvalidModel("quadrature_nodes must be >= 1".into()));
        }
        let mut m = self.clone();
        if flags.quadrature_nodes != m.flags.quadrature_nodes {
            m.gl_nodes = Arc::new(gauss_legendre_unit(flags.quadrature_nodes));
        }
        m.flags = flags;
        Ok(m)
    }

    pub fn with_phi(&self, phi: Phi) -> Result<ModelSpec> {
        validate_phi(&phi)?;
        let mut m = self.clone();
        m.phi = phi;
        Ok(m)
    }

    pub fn with_lyapunov(&self, i: LyapunovIndex, v: Lyapunov) -> ModelSpec {
        let mut m = self.clone();
        match i {
            LyapunovIndex::V0 => m.v0 = v,
            LyapunovIndex::V1 => m.v1 = v,
        }
        m
    }

    pub fn with_horizon(&self, horizon: f64) -> Result<ModelSpec> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(FlowError::InvalidModel(format!("horizon must be positive, got {horizon}")));
        }
        let mut m = self.clone();
        m.horizon = horizon;
        Ok(m)
    }

    /// `true` when `pq/(p+q) ≤ 2d + 6`, i.e. below the exponent range of the C¹ theory.
    /// This is flagged in reports, not rejected.
    pub fn exponent_below_c1_threshold(&self) -> bool {
        self.constants.moment_exponent() <= 2.0 * self.dim_state as f64 + 6.0
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        (self.domain)(x)
    }

    pub fn lyapunov(&self, i: LyapunovIndex) -> &Lyapunov {
        match i {
            LyapunovIndex::V0 => &self.v0,
            LyapunovIndex::V1 => &self.v1,
        }
    }

    fn require_domain(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim_state {
            return Err(FlowError::InvalidModel(format!(
                "point has dimension {} but the model has {}",
                x.len(),
                self.dim_state
            )));
        }
        if self.in_domain(x) {
            Ok(())
        } else {
            Err(FlowError::Domain { point: x.to_vec() })
        }
    }

    fn require_time(&self, t: f64) -> Result<()> {
        if (0.0..self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(FlowError::TimeOutOfRange { t, horizon: self.horizon })
        }
    }

    pub fn eval_drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim_state];
        (self.drift)(x, &mut out);
        check_finite("drift", x, &out)?;
        Ok(out)
    }

    pub fn eval_diffusion(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim_state * self.dim_noise];
        (self.diffusion)(x, &mut out);
        check_finite("diffusion", x, &out)?;
        Ok(out)
    }

    pub fn eval_drift_jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim_state * self.dim_state];
        (self.drift_jacobian)(x, &mut out);
        check_finite("drift_jacobian", x, &out)?;
        Ok(out)
    }

    pub fn eval_diffusion_jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim_state * self.dim_noise * self.dim_state];
        (self.diffusion_jacobian)(x, &mut out);
        check_finite("diffusion_jacobian", x, &out)?;
        Ok(out)
    }

    fn eval_jacobian(&self, which: JacobianKind, x: &[f64]) -> Result<Vec<f64>> {
        match which {
            JacobianKind::Drift => self.eval_drift_jacobian(x),
            JacobianKind::Diffusion => self.eval_diffusion_jacobian(x),
        }
    }

    pub fn eval_v(&self, i: LyapunovIndex, x: &[f64]) -> Result<f64> {
        finite_scalar("lyapunov value", x, self.lyapunov(i).eval(x))
    }

    pub fn eval_vbar(&self, t: f64, x: &[f64]) -> Result<f64> {
        finite_scalar("vbar", x, (self.vbar)(t, x))
    }

    /// `(𝒢_{μ,σ} V)(x) = ⟨∇V(x), μ(x)⟩ + ½ tr(σσᵀ Hess V)(x)`.
    pub fn generator_apply(&self, which: LyapunovIndex, x: &[f64]) -> Result<f64> {
        self.require_domain(x)?;
        self.generator_unchecked(self.lyapunov(which), x)
    }

    /// Generator of an arbitrary `C²` function (domain membership not enforced).
    pub fn generator_unchecked(&self, v: &Lyapunov, x: &[f64]) -> Result<f64> {
        let (d, m) = (self.dim_state, self.dim_noise);
        if v.is_zero() {
            return Ok(0.0);
        }
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        (v.gradient)(x, &mut grad);
        (v.hessian)(x, &mut hess);
        check_finite("lyapunov gradient", x, &grad)?;
        check_finite("lyapunov hessian", x, &hess)?;
        let mu = self.eval_drift(x)?;
        let sigma = self.eval_diffusion(x)?;
        let mut trace = 0.0;
        let mut col = vec![0.0; d];
        let mut hcol = vec![0.0; d];
        for k in 0..m {
            for i in 0..d {
                col[i] = sigma[i * m + k];
            }
            linalg::matvec(&hess, d, d, &col, &mut hcol);
            trace += dot(&col, &hcol);
        }
        finite_scalar("generator", x, dot(&grad, &mu) + 0.5 * trace)
    }

    /// `‖σ(x)ᵀ ∇V(x)‖²`.
    pub fn diffusion_gradient_sq(&self, v: &Lyapunov, x: &[f64]) -> Result<f64> {
        if v.is_zero() {
            return Ok(0.0);
        }
        let (d, m) = (self.dim_state, self.dim_noise);
        let mut grad = vec![0.0; d];
        (v.gradient)(x, &mut grad);
        check_finite("lyapunov gradient", x, &grad)?;
        let sigma = self.eval_diffusion(x)?;
        let mut st = vec![0.0; m];
        linalg::matvec_t(&sigma, d, m, &grad, &mut st);
        Ok(norm2_sq(&st))
    }

    /// Gauss–Legendre approximation of `∫₀¹ J(λx + (1−λ)y) dλ` with `nodes` points.
    ///
    /// Returns `μ′(x)` (resp. `σ′(x)`) unchanged when `x == y`.
    pub fn averaged_jacobian(&self, x: &[f64], y: &[f64], which: JacobianKind, nodes: usize) -> Result<Vec<f64>> {
        if nodes == 0 {
            return Err(FlowError::InvalidModel("nodes must be >= 1".into()));
        }
        if nodes == self.flags.quadrature_nodes {
            let gl = Arc::clone(&self.gl_nodes);
            self.averaged_jacobian_with(x, y, which, &gl.0, &gl.1)
        } else {
            let (n, w) = gauss_legendre_unit(nodes);
            self.averaged_jacobian_with(x, y, which, &n, &w)
        }
    }

    fn averaged_jacobian_default(&self, x: &[f64], y: &[f64], which: JacobianKind) -> Result<Vec<f64>> {
        self.averaged_jacobian(x, y, which, self.flags.quadrature_nodes)
    }

    fn averaged_jacobian_with(
        &self,
        x: &[f64],
        y: &[f64],
        which: JacobianKind,
        nodes: &[f64],
        weights: &[f64],
    ) -> Result<Vec<f64>> {
        self.require_domain(x)?;
        self.require_domain(y)?;
        if x == y {
            return self.eval_jacobian(which, x);
        }
        let mut z = vec![0.0; x.len()];
        let mut acc: Option<Vec<f64>> = None;
        for (&lambda, &w) in nodes.iter().zip(weights) {
            linalg::lerp(lambda, x, y, &mut z);
            if !self.in_domain(&z) {
                return Err(FlowError::Domain { point: z });
            }
            let j = self.eval_jacobian(which, &z)?;
            match acc.as_mut() {
                None => acc = Some(j.iter().map(|v| w * v).collect()),
                Some(a) => a.iter_mut().zip(&j).for_each(|(a, v)| *a += w * v),
            }
        }
        Ok(acc.unwrap_or_default())
    }

    /// `B·h` as a `d × m` matrix for a `d × m × d` tensor `B`.
    pub fn apply_diffusion_tensor(&self, b: &[f64], h: &[f64]) -> Vec<f64> {
        let (d, m) = (self.dim_state, self.dim_noise);
        let mut out = vec![0.0; d * m];
        for (row, o) in out.iter_mut().enumerate() {
            *o = dot(&b[row * d..(row + 1) * d], h);
        }
        out
    }

    /// `⟨h, M⟩ ∈ R^m` for a `d × m` matrix `M`: component `k` is `Σ_i h_i M_{ik}`.
    pub fn inner_with_state(&self, h: &[f64], mat: &[f64]) -> Vec<f64> {
        let (d, m) = (self.dim_state, self.dim_noise);
        let mut out = vec![0.0; m];
        linalg::matvec_t(mat, d, m, h, &mut out);
        out
    }

    /// Left-hand quadratic forms of the C¹ monotonicity hypothesis (without the δ shift).
    pub fn monotonicity_terms(&self, x: &[f64], y: &[f64], h: &[f64]) -> Result<MonotonicityTerms> {
        let d = self.dim_state;
        let a = self.averaged_jacobian_default(x, y, JacobianKind::Drift)?;
        let b = self.averaged_jacobian_default(x, y, JacobianKind::Diffusion)?;
        let mut ah = vec![0.0; d];
        linalg::matvec(&a, d, d, h, &mut ah);
        let bh = self.apply_diffusion_tensor(&b, h);
        let inner = self.inner_with_state(h, &bh);
        Ok(MonotonicityTerms { drift_form: dot(h, &ah), diffusion_hs: norm2_sq(&bh), diffusion_inner: norm2_sq(&inner) })
    }

    /// The bracket `φ(t) + [V₀(x)+V₀(y)]/(2q₀T e^{α₀t}) + [V̄(t,x)+V̄(t,y)]/(2q₁e^{α₁t})`
    /// multiplying `‖h‖²` on the right of both monotonicity hypotheses. With
    /// [`HorizonWeighting::Remaining`] both Lyapunov terms are divided by `T − t` instead.
    pub fn monotonicity_weight(&self, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        let c = &self.constants;
        let (w0, w1) = match self.flags.horizon {
            HorizonWeighting::Total => (self.horizon, 1.0),
            HorizonWeighting::Remaining => (self.horizon - t, self.horizon - t),
        };
        let mut total = self.phi.eval(t);
        if !c.q0.is_infinite() && !self.v0.is_zero() {
            let v = self.eval_v(LyapunovIndex::V0, x)? + self.eval_v(LyapunovIndex::V0, y)?;
            total += v / (2.0 * c.q0 * w0 * (c.alpha0 * t).exp());
        }
        if !c.q1.is_infinite() {
            let v = self.eval_vbar(t, x)? + self.eval_vbar(t, y)?;
            total += v / (2.0 * c.q1 * w1 * (c.alpha1 * t).exp());
        }
        Ok(total)
    }

    /// RHS − LHS of the C¹ local monotonicity hypothesis at `(t, x, y, h)`.
    /// Nonnegative iff the hypothesis holds at that point.
    pub fn monotonicity_margin_c1(&self, t: f64, x: &[f64], y: &[f64], h: &[f64]) -> Result<f64> {
        self.require_time(t)?;
        let hh = norm2_sq(h);
        if hh == 0.0 {
            return Err(FlowError::InvalidModel("direction h must be nonzero".into()));
        }
        let c = &self.constants;
        let terms = self.monotonicity_terms(x, y, h)?;
        let lhs = terms.drift_form
            + c.delta * hh
            + 0.5 * (1.0 + c.delta) * terms.diffusion_hs
            + (c.p - 1.0 + c.p * c.delta) * terms.diffusion_inner / hh;
        let rhs = hh * self.monotonicity_weight(t, x, y)?;
        finite_scalar("c1 margin", x, rhs - lhs)
    }

    /// RHS − LHS of the difference-based (C⁰) monotonicity condition at `(t, x, y)`.
    pub fn monotonicity_margin_c0(&self, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        self.require_domain(x)?;
        self.require_domain(y)?;
        if x == y {
            return Err(FlowError::DegeneratePair { point: x.to_vec() });
        }
        if !(0.0..=self.horizon).contains(&t) {
            return Err(FlowError::TimeOutOfRange { t, horizon: self.horizon });
        }
        let c = &self.constants;
        let diff = linalg::sub(x, y);
        let dd = norm2_sq(&diff);
        let dmu = linalg::sub(&self.eval_drift(x)?, &self.eval_drift(y)?);
        let dsigma = linalg::sub(&self.eval_diffusion(x)?, &self.eval_diffusion(y)?);
        let inner = self.inner_with_state(&diff, &dsigma);
        let lhs = dot(&diff, &dmu)
            + 0.5 * norm2_sq(&dsigma)
            + 0.5 * (2.0 * c.p * (1.0 + c.delta) - 2.0) * norm2_sq(&inner) / dd;
        let rhs = dd * self.monotonicity_weight(t, x, y)?;
        finite_scalar("c0 margin", x, rhs - lhs)
    }

    /// `α_i V_i(x) + β_i − [𝒢V_i(x) + ‖σᵀ∇V_i‖²/(2e^{α_i t}) + 1_{i=1} V̄(t,x)]`.
    pub fn exp_moment_margin(&self, i: LyapunovIndex, t: f64, x: &[f64]) -> Result<f64> {
        let c = &self.constants;
        self.exp_moment_margin_with(i, t, x, c.alpha(i), c.beta(i))
    }

    /// [`Self::exp_moment_margin`] with `(α_i, β_i)` replaced.
    pub fn exp_moment_margin_with(&self, i: LyapunovIndex, t: f64, x: &[f64], alpha: f64, beta: f64) -> Result<f64> {
        let parts = self.exp_moment_parts(i, t, x)?;
        Ok(parts.margin(alpha, beta, t))
    }

    /// The α-independent pieces of the exponential-moment margin at `(t, x)`.
    pub fn exp_moment_parts(&self, i: LyapunovIndex, t: f64, x: &[f64]) -> Result<ExpMomentParts> {
        self.require_domain(x)?;
        if !(0.0..=self.horizon).contains(&t) {
            return Err(FlowError::TimeOutOfRange { t, horizon: self.horizon });
        }
        let v = self.lyapunov(i);
        let value = self.eval_v(i, x)?;
        let generator = self.generator_unchecked(v, x)?;
        let grad_sq = self.diffusion_gradient_sq(v, x)?;
        let vbar = if i.is_v1() { self.eval_vbar(t, x)? } else { 0.0 };
        Ok(ExpMomentParts { value, generator, grad_sq, vbar })
    }

    /// The three growth margins at `(x, y)`; the Lipschitz margin is the
    /// `λ = 1`, `(x₁,x₂,x₃,x₄) = (x,x,y,y)` instance.
    pub fn growth_margins(&self, x: &[f64], y: &[f64]) -> Result<GrowthMargins> {
        self.require_domain(x)?;
        self.require_domain(y)?;
        let c = &self.constants;
        let v0x = self.eval_v(LyapunovIndex::V0, x)?;
        let v0y = self.eval_v(LyapunovIndex::V0, y)?;
        let coeff_growth = c.c1 * (1.0 + v0x).powf(c.gamma) - self.coefficient_size(x)?;
        let jacobian_growth = c.c2 * (2.0 + v0x + v0y).powf(c.gamma) - self.averaged_jacobian_size(x, y)?;
        let dj = linalg::sub(&self.eval_drift_jacobian(x)?, &self.eval_drift_jacobian(y)?);
        let d = self.dim_state;
        let jacobian_lipschitz =
            c.c3 * norm2(&linalg::sub(x, y)) * (4.0 + 2.0 * v0x + 2.0 * v0y).powf(c.gamma) - linalg::op_norm(&dj, d, d);
        Ok(GrowthMargins { coeff_growth, jacobian_growth, jacobian_lipschitz })
    }

    /// `max(‖μ(x)‖, ‖σ(x)‖_HS)`.
    pub fn coefficient_size(&self, x: &[f64]) -> Result<f64> {
        Ok(norm2(&self.eval_drift(x)?).max(linalg::frobenius(&self.eval_diffusion(x)?)))
    }

    /// `max(‖∫μ′‖_{L(H)}, ‖∫σ′‖_{L(H, HS(U,H))})` along the segment `[y, x]`.
    pub fn averaged_jacobian_size(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let d = self.dim_state;
        let a = self.averaged_jacobian_default(x, y, JacobianKind::Drift)?;
        let b = self.averaged_jacobian_default(x, y, JacobianKind::Diffusion)?;
        Ok(linalg::op_norm(&a, d, d).max(linalg::op_norm(&b, d * self.dim_noise, d)))
    }

    /// Quadruple form of the local Lipschitz hypothesis on `μ′`:
    /// `c₃‖λ(x₁−x₃)+(1−λ)(x₂−x₄)‖(4+ΣV₀(x_j))^γ − ‖μ′(λx₁+(1−λ)x₂) − μ′(λx₃+(1−λ)x₄)‖`.
    pub fn jacobian_lipschitz_margin(&self, quad: [&[f64]; 4], lambda: f64) -> Result<f64> {
        let (num, scale) = self.jacobian_lipschitz_parts(quad, lambda)?;
        Ok(self.constants.c3 * scale - num)
    }

    /// `(‖μ′(a) − μ′(b)‖_op, ‖a − b‖·(4+ΣV₀)^γ)` for the quadruple form.
    pub fn jacobian_lipschitz_parts(&self, quad: [&[f64]; 4], lambda: f64) -> Result<(f64, f64)> {
        for x in quad {
            self.require_domain(x)?;
        }
        let d = self.dim_state;
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        linalg::lerp(lambda, quad[0], quad[1], &mut a);
        linalg::lerp(lambda, quad[2], quad[3], &mut b);
        let dj = linalg::sub(&self.eval_drift_jacobian(&a)?, &self.eval_drift_jacobian(&b)?);
        let num = linalg::op_norm(&dj, d, d);
        let mut vsum = 4.0;
        for x in quad {
            vsum += self.eval_v(LyapunovIndex::V0, x)?;
        }
        let scale = norm2(&linalg::sub(&a, &b)) * vsum.powf(self.constants.gamma);
        Ok((num, scale))
    }
}

/// Pieces of the exponential-moment hypothesis that do not depend on `(α, β)`.
#[derive(Clone, Copy, Debug)]
pub struct ExpMomentParts {
    pub value: f64,
    pub generator: f64,
    pub grad_sq: f64,
    pub vbar: f64,
}

impl ExpMomentParts {
    pub fn margin(&self, alpha: f64, beta: f64, t: f64) -> f64 {
        let lhs = self.generator + self.grad_sq / (2.0 * (alpha * t).exp()) + self.vbar;
        alpha * self.value + beta - lhs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(name: &str, mu: fn(f64) -> f64, dmu: fn(f64) -> f64, sigma: f64) -> ModelBuilder {
        ModelSpec::builder(name, 1, 1, 1.0)
            .drift(move |x, o| o[0] = mu(x[0]))
            .drift_jacobian(move |x, o| o[0] = dmu(x[0]))
            .diffusion(move |_, o| o[0] = sigma)
            .diffusion_jacobian(|_, o| o[0] = 0.0)
    }

    fn ou(sigma: f64) -> ModelSpec {
        scalar("ou", |x| -x, |_| -1.0, sigma).v0(Lyapunov::scaled_square_norm(1.0)).build().unwrap()
    }

    fn gl() -> ModelSpec {
        scalar("gl", |x| x - x * x * x, |x| 1.0 - 3.0 * x * x, 1.0)
            .v0(Lyapunov::scaled_square_norm(1.0))
            .build()
            .unwrap()
    }

    /// Independent generator oracle: central finite differences for ∇V and Hess V.
    fn generator_fd(m: &ModelSpec, v: &Lyapunov, x: f64) -> f64 {
        let h = 1e-4;
        let f = |z: f64| v.eval(&[z]);
        let grad = (f(x + h) - f(x - h)) / (2.0 * h);
        let hess = (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
        let mu = m.eval_drift(&[x]).unwrap()[0];
        let s = m.eval_diffusion(&[x]).unwrap()[0];
        grad * mu + 0.5 * s * s * hess
    }

    #[test]
    fn generator_ou_values() {
        let m = ou(1.0);
        assert_eq!(m.generator_apply(LyapunovIndex::V0, &[0.0]).unwrap(), 1.0);
        assert_eq!(m.generator_apply(LyapunovIndex::V0, &[2.0]).unwrap(), -7.0);
    }

    #[test]
    fn generator_ginzburg_landau_matches_fd_oracle() {
        let m = gl();
        let got = m.generator_apply(LyapunovIndex::V0, &[1.0]).unwrap();
        assert_eq!(got, 1.0);
        assert!((generator_fd(&m, &m.v0, 1.0) - 1.0).abs() < 1e-6);
        for x in [-2.0, -0.3, 0.7, 1.9] {
            let a = m.generator_apply(LyapunovIndex::V0, &[x]).unwrap();
            assert!((a - generator_fd(&m, &m.v0, x)).abs() < 1e-5 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn generator_of_constant_is_zero() {
        let m = gl().with_lyapunov(LyapunovIndex::V1, Lyapunov::constant(3.5));
        for x in [-3.0, 0.0, 1.25] {
            assert_eq!(m.generator_apply(LyapunovIndex::V1, &[x]).unwrap(), 0.0);
        }
    }

    #[test]
    fn generator_outside_domain_errors() {
        let m = scalar("pos", |x| -x, |_| -1.0, 1.0).domain(|x| x[0] > 0.0).build().unwrap();
        assert!(matches!(m.generator_apply(LyapunovIndex::V0, &[-1.0]), Err(FlowError::Domain { .. })));
    }

    #[test]
    fn generator_non_finite_reports_point() {
        let m = scalar("blow", |x| 1.0 / x, |x| -1.0 / (x * x), 1.0)
            .v0(Lyapunov::scaled_square_norm(1.0))
            .build()
            .unwrap();
        match m.generator_apply(LyapunovIndex::V0, &[0.0]) {
            Err(FlowError::Evaluation { point, .. }) => assert_eq!(point, vec![0.0]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn averaged_jacobian_cases() {
        let m = gl();
        // 1 − 3∫λ² dλ = 0
        let a = m.averaged_jacobian(&[0.0], &[1.0], JacobianKind::Drift, 2).unwrap();
        assert!(a[0].abs() < 1e-15);
        // trapezoid oracle
        let n = 100_000;
        let trap: f64 = (0..=n)
            .map(|k| {
                let l = k as f64 / n as f64;
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                w * (1.0 - 3.0 * (l * 0.4 + (1.0 - l) * -1.3f64).powi(2))
            })
            .sum::<f64>()
            / n as f64;
        let g = m.averaged_jacobian(&[0.4], &[-1.3], JacobianKind::Drift, 8).unwrap();
        assert!((g[0] - trap).abs() < 1e-9);
        // degenerate segment is bit-exact
        let j = m.eval_drift_jacobian(&[0.37]).unwrap();
        assert_eq!(m.averaged_jacobian(&[0.37], &[0.37], JacobianKind::Drift, 8).unwrap(), j);
        assert!(m.averaged_jacobian(&[0.0], &[1.0], JacobianKind::Drift, 0).is_err());
    }

    #[test]
    fn averaged_jacobian_linear_is_constant() {
        let m = ModelSpec::builder("lin", 2, 2, 1.0)
            .drift(|x, o| {
                o[0] = -x[0] + 2.0 * x[1];
                o[1] = 0.5 * x[0] - 3.0 * x[1];
            })
            .drift_jacobian(|_, o| o.copy_from_slice(&[-1.0, 2.0, 0.5, -3.0]))
            .diffusion(|_, o| o.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]))
            .diffusion_jacobian(|_, o| o.iter_mut().for_each(|v| *v = 0.0))
            .build()
            .unwrap();
        let a = m.averaged_jacobian(&[1.0, 2.0], &[-3.0, 0.5], JacobianKind::Drift, 8).unwrap();
        for (got, want) in a.iter().zip([-1.0, 2.0, 0.5, -3.0]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn c1_margin_additive_linear() {
        let m = scalar("ou", |x| -x, |_| -1.0, 0.7).build().unwrap();
        let v = m.monotonicity_margin_c1(0.2, &[1.0], &[-2.0], &[1.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        for s in [0.5, 2.0, 10.0] {
            let w = m.monotonicity_margin_c1(0.2, &[1.0], &[-2.0], &[s]).unwrap();
            assert!((w - s * s * v).abs() <= 1e-10 * w.abs());
        }
        assert!(m.monotonicity_margin_c1(1.0, &[0.0], &[1.0], &[1.0]).is_err());
        assert!(m.monotonicity_margin_c1(0.0, &[0.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn c0_margin_linear_and_symmetric() {
        let m = scalar("ou", |x| -x, |_| -1.0, 0.7).build().unwrap();
        let v = m.monotonicity_margin_c0(0.3, &[1.5], &[-0.5], ).unwrap();
        assert!((v - 4.0).abs() < 1e-14);
        let g = gl();
        let a = g.monotonicity_margin_c0(0.3, &[1.5], &[-0.5]).unwrap();
        let b = g.monotonicity_margin_c0(0.3, &[-0.5], &[1.5]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(g.monotonicity_margin_c0(0.0, &[1.0], &[1.0]), Err(FlowError::DegeneratePair { .. })));
    }

    #[test]
    fn exp_margin_ou_unit_noise_vanishes() {
        let mut c = Constants::default();
        c.beta0 = 1.0;
        let m = ou(1.0).with_constants(c).unwrap();
        for x in [-2.0, -0.5, 0.0, 0.75, 3.0] {
            assert!(m.exp_moment_margin(LyapunovIndex::V0, 0.0, &[x]).unwrap().abs() < 1e-12);
        }
        // all-zero data
        assert_eq!(m.exp_moment_margin(LyapunovIndex::V1, 0.4, &[2.0]).unwrap(), 0.0);
    }

    #[test]
    fn exp_margin_ginzburg_landau_nonnegative_on_grid() {
        let mut c = Constants::default();
        c.alpha0 = 3.0;
        c.beta0 = 1.0;
        let m = scalar("gl", |x| x - x * x * x, |x| 1.0 - 3.0 * x * x, 0.5)
            .v0(Lyapunov::scaled_square_norm(1.0))
            .constants(c)
            .build()
            .unwrap();
        let mut min = f64::INFINITY;
        for k in 0..=600 {
            let x = -3.0 + k as f64 * 0.01;
            for t in [0.0, 0.5, 1.0] {
                min = min.min(m.exp_moment_margin(LyapunovIndex::V0, t, &[x]).unwrap());
            }
        }
        // minimum at x = 0: 1 − ¼
        assert!((min - 0.75).abs() < 1e-12, "{min}");
    }

    #[test]
    fn growth_margin_examples() {
        let zero = scalar("zero", |_| 0.0, |_| 0.0, 0.0).v0(Lyapunov::scaled_square_norm(1.0)).build().unwrap();
        let g = zero.growth_margins(&[1.5], &[0.0]).unwrap();
        assert_eq!(g.coeff_growth, zero.constants.c1 * (1.0 + 2.25f64).powf(zero.constants.gamma));

        let mut c = Constants::default();
        c.gamma = 1.5;
        c.c1 = 2.0;
        c.c3 = 3.0;
        let m = scalar("gl", |x| x - x * x * x, |x| 1.0 - 3.0 * x * x, 0.5)
            .v0(Lyapunov::scaled_square_norm(1.0))
            .constants(c)
            .build()
            .unwrap();
        for k in -300..=300 {
            let x = k as f64 / 50.0;
            let g = m.growth_margins(&[x], &[0.3 - x]).unwrap();
            assert!(g.coeff_growth >= 0.0, "x={x}");
            assert!(g.jacobian_lipschitz >= 0.0, "x={x}");
        }
    }

    #[test]
    fn q_relation_enforced() {
        let mut c = Constants::default();
        c.q = 10.0;
        c.q0 = 20.0;
        c.q1 = 30.0;
        assert!(c.validate(1).is_err());
        c.q1 = 20.0;
        assert!(c.validate(1).is_ok());
        let mut bad = Constants::default();
        bad.gamma = 0.25; // 1/γ = 4 > pq/(p+q) = 2
        assert!(bad.validate(1).is_err());
    }

    #[test]
    fn phi_integrals() {
        let pw = Phi::PiecewiseConstant { breaks: vec![0.0, 0.5], values: vec![1.0, 3.0] };
        assert_eq!(pw.integral(0.25, 1.0), 0.25 + 1.5);
        assert_eq!(pw.eval(0.5), 3.0);
        let f = Phi::Function(Arc::new(|t| t * t));
        assert!((f.integral(0.0, 1.0) - 1.0 / 3.0).abs() < 1e-7);
    }
}
