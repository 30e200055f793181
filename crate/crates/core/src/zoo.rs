//! Built-in models with documented boxes, shipped constants and closed-form oracles.

use std::sync::Arc;

use crate::checker::{FittedConstants, SampleRegion};
use crate::error::{FlowError, Result};
use crate::model::{Constants, Lyapunov, ModelSpec, Phi};

pub const MODEL_NAMES: [&str; 6] = ["ou", "gbm", "ginzburg_landau", "double_well", "lorenz_stochastic", "cir"];

/// Shared default horizon of the built-ins.
pub const HORIZON: f64 = 1.0;

/// Closed form of the spatial derivative `∂X/∂x·v`.
#[derive(Clone, Copy, Debug)]
pub enum DerivativeOracle {
    /// `e^{−(t−s)}·v`-type deterministic factor `f(s, t)` multiplying `v`.
    Deterministic(fn(f64, f64) -> f64),
    /// `X^x_{s,t}/x` pathwise, for scalar linear flows.
    PathwiseRatio,
}

/// `(s, t, x) ↦` a componentwise moment of `X^x_{s,t}`.
pub type MomentFn = fn(f64, f64, &[f64]) -> Vec<f64>;
/// `(c, s, t, x) ↦ E exp(c‖X^x_{s,t}‖²)`.
pub type ExpMomentFn = fn(f64, f64, f64, &[f64]) -> f64;

/// Closed-form moments of the exact flow.
#[derive(Clone, Copy, Debug, Default)]
pub struct Oracle {
    pub flow_mean: Option<MomentFn>,
    pub flow_variance: Option<MomentFn>,
    pub derivative_process: Option<DerivativeOracle>,
    /// Infinite at and above the blow-up threshold of `c`.
    pub exp_moment: Option<ExpMomentFn>,
}

impl Oracle {
    pub fn available(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.flow_mean.is_some() {
            out.push("flow_mean");
        }
        if self.flow_variance.is_some() {
            out.push("flow_variance");
        }
        if self.derivative_process.is_some() {
            out.push("derivative_process");
        }
        if self.exp_moment.is_some() {
            out.push("exp_moment");
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct NamedModel {
    pub name: &'static str,
    pub description: &'static str,
    pub equations: Vec<String>,
    pub spec: ModelSpec,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub default_start: Vec<f64>,
    /// Whether the shipped constants are expected to pass certification on the box.
    pub certified: bool,
    pub oracle: Oracle,
    /// Least constants produced by `fit_constants` on the documented region, frozen as
    /// regression values.
    pub fitted: Option<FittedConstants>,
}

impl NamedModel {
    /// The documented certification region.
    pub fn region(&self, n_points: usize) -> Result<SampleRegion> {
        SampleRegion::new(self.box_lo.clone(), self.box_hi.clone(), n_points)
    }
}

pub fn model_by_name(name: &str) -> Result<NamedModel> {
    match name {
        "ou" => Ok(ou()),
        "gbm" => Ok(gbm()),
        "ginzburg_landau" => Ok(ginzburg_landau()),
        "double_well" => Ok(double_well()),
        "lorenz_stochastic" => Ok(lorenz_stochastic()),
        "cir" => Ok(cir(1.0, 1.0, 0.5)),
        other => Err(FlowError::UnknownModel {
            name: other.into(),
            available: MODEL_NAMES.iter().map(|s| s.to_string()).collect(),
        }),
    }
}

fn fill_zero(_: &[f64], o: &mut [f64]) {
    o.iter_mut().for_each(|v| *v = 0.0);
}

/// `σ ≡ s·Id` on `R^d` with `m = d`.
fn additive_identity(d: usize, s: f64) -> impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static {
    move |_, o| {
        o.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            o[i * d + i] = s;
        }
    }
}

fn ou_mean(s: f64, t: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|xi| xi * (-(t - s)).exp()).collect()
}

fn ou_variance(s: f64, t: f64, x: &[f64]) -> Vec<f64> {
    vec![-(-2.0 * (t - s)).exp_m1() / 2.0; x.len()]
}

fn ou_decay(s: f64, t: f64) -> f64 {
    (-(t - s)).exp()
}

/// `E exp(cX²)` for `X ~ N(m, v)`: `(1−2cv)^{−½} exp(cm²/(1−2cv))`, `∞` once `2cv ≥ 1`.
pub fn gaussian_exp_square(c: f64, mean: f64, var: f64) -> f64 {
    let k = 1.0 - 2.0 * c * var;
    if k <= 0.0 {
        return f64::INFINITY;
    }
    (c * mean * mean / k).exp() / k.sqrt()
}

fn ou_exp_moment(c: f64, s: f64, t: f64, x: &[f64]) -> f64 {
    let m = ou_mean(s, t, x);
    let v = ou_variance(s, t, x);
    m.iter().zip(&v).map(|(mi, vi)| gaussian_exp_square(c, *mi, *vi)).product()
}

/// Ornstein–Uhlenbeck: `dX = −X dt + dW` on `R`.
pub fn ou() -> NamedModel {
    let constants = Constants { beta0: 1.0, c1: 2.0, c2: 2.0, c3: 2.0, ..Constants::default() };
    let spec = ModelSpec::builder("ou", 1, 1, HORIZON)
        .drift(|x, o| o[0] = -x[0])
        .drift_jacobian(|_, o| o[0] = -1.0)
        .diffusion(|_, o| o[0] = 1.0)
        .diffusion_jacobian(fill_zero)
        .v0(Lyapunov::scaled_square_norm(1.0))
        .phi(Phi::Constant(0.0))
        .constants(constants)
        .build()
        .expect("ou model");
    NamedModel {
        name: "ou",
        description: "Ornstein-Uhlenbeck process, linear drift and additive unit noise",
        equations: vec![
            "mu(x) = -x".into(),
            "sigma(x) = 1".into(),
            "V0(x) = x^2, V1 = 0, Vbar = 0".into(),
            "E[X_{s,t}^x] = x e^{-(t-s)}, Var = (1 - e^{-2(t-s)})/2".into(),
        ],
        spec,
        box_lo: vec![-5.0],
        box_hi: vec![5.0],
        default_start: vec![1.0],
        certified: true,
        oracle: Oracle {
            flow_mean: Some(ou_mean),
            flow_variance: Some(ou_variance),
            derivative_process: Some(DerivativeOracle::Deterministic(ou_decay)),
            exp_moment: Some(ou_exp_moment),
        },
        fitted: None,
    }
}

const GBM_A: f64 = 0.05;
const GBM_B: f64 = 0.2;

/// Geometric Brownian motion `dX = aX dt + bX dW` with `a = 0.05`, `b = 0.2`.
pub fn gbm() -> NamedModel {
    let (a, b) = (GBM_A, GBM_B);
    let constants = Constants { c1: 1.0, c2: 1.0, c3: 1.0, ..Constants::default() };
    let spec = ModelSpec::builder("gbm", 1, 1, HORIZON)
        .drift(move |x, o| o[0] = a * x[0])
        .drift_jacobian(move |_, o| o[0] = a)
        .diffusion(move |x, o| o[0] = b * x[0])
        .diffusion_jacobian(move |_, o| o[0] = b)
        .v0(Lyapunov::zero())
        .phi(Phi::Constant(0.7))
        .constants(constants)
        .build()
        .expect("gbm model");
    NamedModel {
        name: "gbm",
        description: "geometric Brownian motion; linear flow, derivative equals X/x pathwise",
        equations: vec![
            format!("mu(x) = {a} x"),
            format!("sigma(x) = {b} x"),
            "V0 = V1 = Vbar = 0".into(),
            "E[X_{s,t}^x] = x e^{a(t-s)}, dX/dx = X/x".into(),
        ],
        spec,
        box_lo: vec![-5.0],
        box_hi: vec![5.0],
        default_start: vec![1.0],
        certified: true,
        oracle: Oracle {
            flow_mean: Some(gbm_mean),
            flow_variance: Some(gbm_variance),
            derivative_process: Some(DerivativeOracle::PathwiseRatio),
            exp_moment: None,
        },
        fitted: None,
    }
}

fn gbm_mean(s: f64, t: f64, x: &[f64]) -> Vec<f64> {
    vec![x[0] * (GBM_A * (t - s)).exp()]
}

fn gbm_variance(s: f64, t: f64, x: &[f64]) -> Vec<f64> {
    let h = t - s;
    vec![x[0] * x[0] * (2.0 * GBM_A * h).exp() * (GBM_B * GBM_B * h).exp_m1()]
}

fn gl_constants() -> Constants {
    Constants { alpha0: 3.0, beta0: 1.0, gamma: 1.5, c1: 2.0, c2: 1.0, c3: 3.0, ..Constants::default() }
}

/// Scalar Ginzburg–Landau: `dX = (X − X³) dt + ½ dW`.
pub fn ginzburg_landau() -> NamedModel {
    let spec = ModelSpec::builder("ginzburg_landau", 1, 1, HORIZON)
        .drift(|x, o| o[0] = x[0] - x[0].powi(3))
        .drift_jacobian(|x, o| o[0] = 1.0 - 3.0 * x[0] * x[0])
        .diffusion(|_, o| o[0] = 0.5)
        .diffusion_jacobian(fill_zero)
        .v0(Lyapunov::scaled_square_norm(1.0))
        .phi(Phi::Constant(2.0))
        .constants(gl_constants())
        .build()
        .expect("ginzburg_landau model");
    NamedModel {
        name: "ginzburg_landau",
        description: "scalar Ginzburg-Landau, superlinear one-sided Lipschitz drift",
        equations: vec!["mu(x) = x - x^3".into(), "sigma(x) = 0.5".into(), "V0(x) = x^2, V1 = 0, Vbar = 0".into()],
        spec,
        box_lo: vec![-3.0],
        box_hi: vec![3.0],
        default_start: vec![0.5],
        certified: true,
        oracle: Oracle::default(),
        fitted: Some(GL_FIT),
    }
}

/// Least constants on `[−3, 3]` from `fit_constants` with the default region
/// (4096 Sobol points, 4 directions, 8 times) and seed 0.
pub const GL_FIT: FittedConstants = FittedConstants {
    c1_min: 7.588_936_418_894_607e-1,
    c2_min: 3.534_940_323_292_334e-1,
    c3_min: 4.0526305315402456e-1,
    alpha0_min: 5.051_022_331_653_979e-2,
    beta0_min: 1.000_000_000_001,
    alpha1_min: 0.0,
    beta1_min: 0.0,
    phi_min: 1.4999993668084801e0,
    passed: true,
};

/// `d`-dimensional Ginzburg–Landau with componentwise cubic drift and `σ = ½·Id`.
pub fn ginzburg_landau_componentwise(d: usize) -> ModelSpec {
    ModelSpec::builder(format!("ginzburg_landau_{d}d"), d, d, HORIZON)
        .drift(|x, o| {
            for (oi, xi) in o.iter_mut().zip(x) {
                *oi = xi - xi.powi(3);
            }
        })
        .drift_jacobian(move |x, o| {
            o.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..d {
                o[i * d + i] = 1.0 - 3.0 * x[i] * x[i];
            }
        })
        .diffusion(additive_identity(d, 0.5))
        .diffusion_jacobian(fill_zero)
        .v0(Lyapunov::scaled_square_norm(1.0))
        .phi(Phi::Constant(2.0))
        .constants(gl_constants())
        .build()
        .expect("componentwise ginzburg_landau model")
}

/// Planar double well `μ(x) = (x₁ − x₁³, −x₂)`, `σ = ½·Id`.
pub fn double_well() -> NamedModel {
    let constants = Constants { alpha0: 3.0, beta0: 1.0, gamma: 1.5, c1: 2.0, c2: 1.0, c3: 3.0, ..Constants::default() };
    let spec = ModelSpec::builder("double_well", 2, 2, HORIZON)
        .drift(|x, o| {
            o[0] = x[0] - x[0].powi(3);
            o[1] = -x[1];
        })
        .drift_jacobian(|x, o| o.copy_from_slice(&[1.0 - 3.0 * x[0] * x[0], 0.0, 0.0, -1.0]))
        .diffusion(additive_identity(2, 0.5))
        .diffusion_jacobian(fill_zero)
        .v0(Lyapunov::scaled_square_norm(1.0))
        .phi(Phi::Constant(2.0))
        .constants(constants)
        .build()
        .expect("double_well model");
    NamedModel {
        name: "double_well",
        description: "gradient flow of the double-well potential (x1^2-1)^2/4 + x2^2/2 with additive noise",
        equations: vec![
            "mu(x) = (x1 - x1^3, -x2)".into(),
            "sigma(x) = 0.5 Id".into(),
            "V0(x) = |x|^2, V1 = 0, Vbar = 0".into(),
        ],
        spec,
        box_lo: vec![-2.0, -2.0],
        box_hi: vec![2.0, 2.0],
        default_start: vec![0.5, 0.5],
        certified: true,
        oracle: Oracle::default(),
        fitted: None,
    }
}

const LORENZ_S: f64 = 10.0;
const LORENZ_R: f64 = 28.0;
const LORENZ_B: f64 = 8.0 / 3.0;

/// Lorenz system with additive noise of intensity 0.3.
pub fn lorenz_stochastic() -> NamedModel {
    let constants = Constants { alpha0: 30.0, beta0: 0.01, c1: 165.0, c2: 14.0, c3: 0.2, ..Constants::default() };
    let spec = ModelSpec::builder("lorenz_stochastic", 3, 3, HORIZON)
        .drift(|x, o| {
            o[0] = LORENZ_S * (x[1] - x[0]);
            o[1] = x[0] * (LORENZ_R - x[2]) - x[1];
            o[2] = x[0] * x[1] - LORENZ_B * x[2];
        })
        .drift_jacobian(|x, o| {
            o.copy_from_slice(&[-LORENZ_S, LORENZ_S, 0.0, LORENZ_R - x[2], -1.0, -x[0], x[1], x[0], -LORENZ_B])
        })
        .diffusion(additive_identity(3, 0.3))
        .diffusion_jacobian(fill_zero)
        .v0(Lyapunov::scaled_square_norm(0.01))
        .phi(Phi::Constant(40.0))
        .constants(constants)
        .build()
        .expect("lorenz model");
    NamedModel {
        name: "lorenz_stochastic",
        description: "Lorenz-63 (10, 28, 8/3) with additive noise 0.3",
        equations: vec![
            "mu(x) = (10 (x2 - x1), x1 (28 - x3) - x2, x1 x2 - 8/3 x3)".into(),
            "sigma(x) = 0.3 Id".into(),
            "V0(x) = |x|^2/100, V1 = 0, Vbar = 0".into(),
        ],
        spec,
        box_lo: vec![-20.0; 3],
        box_hi: vec![20.0; 3],
        default_start: vec![1.0, 1.0, 1.0],
        certified: true,
        oracle: Oracle::default(),
        fitted: None,
    }
}

/// Cox–Ingersoll–Ross `dX = κ(θ − X) dt + ξ√X dW` on `(0, ∞)`.
pub fn cir(kappa: f64, theta: f64, xi: f64) -> NamedModel {
    let spec = ModelSpec::builder("cir", 1, 1, HORIZON)
        .drift(move |x, o| o[0] = kappa * (theta - x[0]))
        .drift_jacobian(move |_, o| o[0] = -kappa)
        .diffusion(move |x, o| o[0] = xi * x[0].max(0.0).sqrt())
        .diffusion_jacobian(move |x, o| o[0] = xi / (2.0 * x[0].sqrt()))
        .domain_open(|x| x[0] > 0.0)
        .domain(|x| x[0] > 0.0)
        .v0(Lyapunov::scaled_square_norm(1.0))
        .phi(Phi::Constant(1.0))
        .constants(Constants { beta0: 1.0, ..Constants::default() })
        .build()
        .expect("cir model");
    NamedModel {
        name: "cir",
        description: "Cox-Ingersoll-Ross on (0, inf); boundary stressor, not certified (sigma' blows up at 0)",
        equations: vec![
            format!("mu(x) = {kappa} ({theta} - x)"),
            format!("sigma(x) = {xi} sqrt(x)"),
            "domain: x > 0".into(),
        ],
        spec,
        box_lo: vec![0.1],
        box_hi: vec![3.0],
        default_start: vec![1.0],
        certified: false,
        oracle: Oracle::default(),
        fitted: None,
    }
}

/// Shared handle used by the CLI to hold a model behind a trait object boundary.
pub type SharedModel = Arc<NamedModel>;
