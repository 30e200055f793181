//! Batch front-end: run configurations, report files and the `flowlab` verbs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checker::{certify_with_tolerance, ConditionReport, SampleRegion, Sampler};
use crate::error::{FlowError, Result};
use crate::estimate::{
    check_derivative_moment_bound, check_exp_moment_bound, check_flow_holder, check_gronwall, check_lyapunov_bound,
    check_multiple_exp_bound, check_poly_moment_bound, gradient_assembly, kolmogorov_table, BoundReport, FlowPoint,
    GronwallAlpha, GronwallParams, KolmogorovParams,
};
use crate::model::{AlphaReading, Constants, Flags, HorizonWeighting, LyapunovIndex, ModelSpec, Phi};
use crate::numfmt::{ext_real, sci17};
use crate::sim::{
    simulate_flow, simulate_variational, Anchor, AnchorOrigin, Direction, ExitPolicy, FlowGrid, PathEnsemble, Scheme,
};
use crate::zoo::{model_by_name, NamedModel, MODEL_NAMES};

pub const CHECK_IDS: [&str; 10] = [
    "certify",
    "lyapunov",
    "exp_moment",
    "poly_moment",
    "multiple_exp",
    "gronwall",
    "flow_holder",
    "derivative_moment",
    "kolmogorov",
    "gradient_assembly",
];

const CHECK_SUMMARIES: [&str; 10] = [
    "sampled margins of every structural hypothesis on the region",
    "E V(X_t) against the Lyapunov growth bound",
    "exponential moment of V(X_t) plus the Vbar integral",
    "polynomial moment of order pq/(p+q)",
    "product of four exponential functionals",
    "stochastic Gronwall bound for the first two anchors",
    "flow Hoelder bound for the first two anchors",
    "variational derivative moment along the first coordinate",
    "Hoelder quotients of (s, t, x) -> X over all anchors and record times",
    "flow increment assembled from coordinate derivatives, order in |v|",
];

pub const EXIT_PASS: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_FALSIFIED: i32 = 2;

const DEFAULT_DT: f64 = 1.0 / 256.0;
const DEFAULT_N_PATHS: usize = 10_000;
const SMOKE_N_PATHS: usize = 1_000;
const SMOKE_CHECKS: [&str; 2] = ["lyapunov", "derivative_moment"];
const RECORD_SPACING: usize = 8;

/// `f64` that reads `"inf"` as `+∞`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExtReal(#[serde(with = "ext_real")] pub f64);

/// Partial overrides of the model constants; unset keys keep the shipped values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsOverride {
    pub alpha0: Option<f64>,
    pub alpha1: Option<f64>,
    pub beta0: Option<f64>,
    pub beta1: Option<f64>,
    pub p: Option<f64>,
    pub q: Option<ExtReal>,
    pub q0: Option<ExtReal>,
    pub q1: Option<ExtReal>,
    pub delta: Option<f64>,
    pub gamma: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub c3: Option<f64>,
    /// Constant value of φ.
    pub phi: Option<f64>,
}

impl ConstantsOverride {
    fn apply(&self, c: &mut Constants) {
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut c.alpha0, self.alpha0);
        set(&mut c.alpha1, self.alpha1);
        set(&mut c.beta0, self.beta0);
        set(&mut c.beta1, self.beta1);
        set(&mut c.p, self.p);
        set(&mut c.q, self.q.map(|e| e.0));
        set(&mut c.q0, self.q0.map(|e| e.0));
        set(&mut c.q1, self.q1.map(|e| e.0));
        set(&mut c.delta, self.delta);
        set(&mut c.gamma, self.gamma);
        set(&mut c.c1, self.c1);
        set(&mut c.c2, self.c2);
        set(&mut c.c3, self.c3);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
    pub n_points: Option<usize>,
    pub n_directions: Option<usize>,
    pub n_times: Option<usize>,
    pub sampler: Option<Sampler>,
    pub tol_cert: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dt: Option<f64>,
    pub n_paths: Option<usize>,
    pub horizon: Option<f64>,
    pub record_times: Option<Vec<f64>>,
    pub anchors: Option<Vec<Anchor>>,
    pub directions: Option<Vec<Direction>>,
    pub scheme: Option<Scheme>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlagsConfig {
    pub horizon: Option<HorizonWeighting>,
    pub alpha_unsubscripted: Option<AlphaReading>,
    pub quadrature_nodes: Option<usize>,
    pub exit_policy: Option<ExitPolicy>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GronwallConfig {
    pub p: Option<f64>,
    pub r: Option<f64>,
    pub delta: Option<f64>,
    pub alpha: Option<GronwallAlpha>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientConfig {
    pub tol: Option<f64>,
    pub min_order: Option<f64>,
}

/// A run configuration as written by the user. Every key except `model` and `seed` is
/// optional and defaults from the model and the preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<String>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub preset: Option<String>,
    pub checks: Option<Vec<String>>,
    #[serde(default)]
    pub constants: ConstantsOverride,
    #[serde(default)]
    pub region: RegionConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub flags: FlagsConfig,
    #[serde(default)]
    pub gronwall: GronwallConfig,
    #[serde(default)]
    pub gradient: GradientConfig,
}

/// Every setting of a run made explicit; echoed into the manifest and sufficient to
/// reproduce the non-manifest outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub model: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub checks: Vec<String>,
    pub constants: Constants,
    pub phi: Option<f64>,
    pub region: SampleRegion,
    pub tol_cert: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub horizon: f64,
    pub record_times: Vec<f64>,
    pub anchors: Vec<Anchor>,
    pub directions: Vec<Direction>,
    pub scheme: Scheme,
    pub flags: Flags,
    pub exit_policy: ExitPolicy,
    pub gronwall: GronwallParams,
    pub gradient_tol: f64,
    pub gradient_min_order: f64,
}

impl RunConfig {
    /// Parses TOML; errors name the offending line and key.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FlowError::Config(format!("malformed config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| FlowError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| FlowError::Config(format!("{}: {e}", path.display())))
    }

    /// Fills every default from the named model and the preset.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let name = self.model.clone().ok_or_else(|| FlowError::Config("missing key 'model'".into()))?;
        let seed = self.seed.ok_or_else(|| FlowError::Config("missing key 'seed' (no implicit entropy)".into()))?;
        let nm = model_by_name(&name)?;
        let smoke = match self.preset.as_deref() {
            None => false,
            Some("smoke") => true,
            Some(other) => return Err(FlowError::Config(format!("unknown preset '{other}'; valid presets: smoke"))),
        };
        let checks = match &self.checks {
            Some(c) => c.clone(),
            None if smoke => SMOKE_CHECKS.iter().map(|s| s.to_string()).collect(),
            None => vec!["certify".into(), "lyapunov".into()],
        };
        for c in &checks {
            if !CHECK_IDS.contains(&c.as_str()) {
                return Err(FlowError::UnknownCheck {
                    name: c.clone(),
                    valid: CHECK_IDS.iter().map(|s| s.to_string()).collect(),
                });
            }
        }
        let wants = |id: &str| checks.iter().any(|c| c == id);
        let d = nm.spec.dim_state;

        let mut constants = nm.spec.constants;
        self.constants.apply(&mut constants);

        let r = &self.region;
        let mut region = SampleRegion::new(
            r.lo.clone().unwrap_or_else(|| nm.box_lo.clone()),
            r.hi.clone().unwrap_or_else(|| nm.box_hi.clone()),
            r.n_points.unwrap_or(1024),
        )?
        .with_counts(r.n_directions.unwrap_or(4), r.n_times.unwrap_or(8));
        region = region.with_sampler(r.sampler.unwrap_or_default());

        let g = &self.grid;
        let horizon = g.horizon.unwrap_or(nm.spec.horizon);
        let dt = g.dt.unwrap_or(DEFAULT_DT);
        let anchors = match &g.anchors {
            Some(a) => a.clone(),
            None => {
                let mut a = vec![Anchor::new(0.0, nm.default_start.clone())];
                if wants("gronwall") || wants("flow_holder") {
                    a.push(Anchor::new(0.0, nm.default_start.iter().map(|v| 0.5 * v).collect()));
                }
                a
            }
        };
        let s_max = anchors.iter().map(|a| a.s).fold(0.0, f64::max);
        let record_times =
            g.record_times.clone().unwrap_or_else(|| FlowGrid::uniform_record_times(s_max, horizon, dt, RECORD_SPACING));
        let directions = match &g.directions {
            Some(v) => v.clone(),
            None if wants("gradient_assembly") => {
                vec![Direction { v: vec![1.0 / (d as f64).sqrt(); d], y_values: vec![1e-1, 1e-2, 1e-3] }]
            }
            None => Vec::new(),
        };

        let f = &self.flags;
        let flags = Flags {
            horizon: f.horizon.unwrap_or(nm.spec.flags.horizon),
            alpha_unsubscripted: f.alpha_unsubscripted.unwrap_or(nm.spec.flags.alpha_unsubscripted),
            quadrature_nodes: f.quadrature_nodes.unwrap_or(nm.spec.flags.quadrature_nodes),
        };
        let gw = &self.gronwall;
        Ok(ResolvedConfig {
            model: name,
            seed,
            output_dir: self.output_dir.clone().unwrap_or_else(|| PathBuf::from("flowlab_out")),
            checks,
            constants,
            phi: self.constants.phi,
            region,
            tol_cert: r.tol_cert.unwrap_or(0.0),
            dt,
            n_paths: g.n_paths.unwrap_or(if smoke { SMOKE_N_PATHS } else { DEFAULT_N_PATHS }),
            horizon,
            record_times,
            anchors,
            directions,
            scheme: g.scheme.unwrap_or_default(),
            flags,
            exit_policy: f.exit_policy.unwrap_or_default(),
            gronwall: GronwallParams {
                p: gw.p.unwrap_or(4.0),
                r: gw.r.unwrap_or(8.0),
                delta: gw.delta.unwrap_or(1.0),
                alpha: gw.alpha.unwrap_or_default(),
            },
            gradient_tol: self.gradient.tol.unwrap_or(1e-10),
            gradient_min_order: self.gradient.min_order.unwrap_or(1.8),
        })
    }
}

impl ResolvedConfig {
    /// The zoo model with this configuration's constants, φ, flags and horizon applied.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let nm = model_by_name(&self.model)?;
        let mut spec = nm.spec.with_horizon(self.horizon)?.with_flags(self.flags)?.with_constants(self.constants)?;
        if let Some(phi) = self.phi {
            spec = spec.with_phi(Phi::Constant(phi))?;
        }
        Ok(spec)
    }

    pub fn flow_grid(&self) -> FlowGrid {
        FlowGrid::new(self.anchors.clone(), self.dt, self.n_paths, self.record_times.clone())
            .with_directions(self.directions.clone())
            .with_scheme(self.scheme)
            .with_exit_policy(self.exit_policy)
    }

    fn wants(&self, id: &str) -> bool {
        self.checks.iter().any(|c| c == id)
    }
}

/// Everything a run produced, before it is written to disk.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub condition_report: ConditionReport,
    pub bound_reports: Vec<BoundReport>,
    pub kolmogorov_csv: Option<Vec<u8>>,
    /// All requested checks satisfied.
    pub passed: bool,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed { EXIT_PASS } else { EXIT_FALSIFIED }
    }
}

fn base_anchors(ens: &PathEnsemble) -> Vec<usize> {
    (0..ens.n_anchors()).filter(|&i| matches!(ens.anchors[i].origin, AnchorOrigin::Base)).collect()
}

fn pair(bases: &[usize], id: &str) -> Result<(usize, usize)> {
    match bases {
        [a, b, ..] => Ok((*a, *b)),
        _ => Err(FlowError::Config(format!("check '{id}' needs at least two anchors"))),
    }
}

fn lyapunov_indices(spec: &ModelSpec) -> Vec<LyapunovIndex> {
    let mut out = vec![LyapunovIndex::V0];
    if !spec.lyapunov(LyapunovIndex::V1).is_zero() {
        out.push(LyapunovIndex::V1);
    }
    out
}

/// Rate and shift `c` with `𝒢(V + c) ≤ α(V + c)` implied by `𝒢V ≤ αV + β` and `V ≥ 0`:
/// `c = β/α` for `α > 0`, else `α = 1`, `c = β`.
pub fn lyapunov_rate(spec: &ModelSpec, i: LyapunovIndex) -> (f64, f64) {
    let (alpha, beta) = (spec.constants.alpha(i), spec.constants.beta(i));
    if beta <= 0.0 {
        (alpha, 0.0)
    } else if alpha > 0.0 {
        (alpha, beta / alpha)
    } else {
        (1.0, beta)
    }
}

fn tag(r: BoundReport, anchor: usize) -> BoundReport {
    r.int("anchor", anchor)
}

/// Executes a resolved configuration without touching the filesystem.
pub fn execute(cfg: &ResolvedConfig) -> Result<RunOutcome> {
    let spec = cfg.model_spec()?;
    cfg.region.validate(&spec)?;
    let condition_report = certify_with_tolerance(&spec, &cfg.region, cfg.seed, cfg.tol_cert)?;
    let mut passed = !cfg.wants("certify") || condition_report.passed;

    let sim_checks = cfg.checks.iter().any(|c| c != "certify");
    let mut reports = Vec::new();
    let mut kolmogorov_csv = None;
    if sim_checks {
        let ens = simulate_flow(&spec, &cfg.flow_grid(), cfg.seed)?;
        let bases = base_anchors(&ens);
        let last = ens.final_record();
        for id in &cfg.checks {
            match id.as_str() {
                "certify" => {}
                "lyapunov" => {
                    for &a in &bases {
                        for i in lyapunov_indices(&spec) {
                            let (alpha, shift) = lyapunov_rate(&spec, i);
                            let shifted = spec.with_lyapunov(i, spec.lyapunov(i).shifted(shift));
                            let r = check_lyapunov_bound(&shifted, &ens, a, last, i, alpha)?;
                            reports.push(tag(r, a).num("shift", shift));
                        }
                    }
                }
                "exp_moment" => {
                    for &a in &bases {
                        for i in lyapunov_indices(&spec) {
                            reports.push(tag(check_exp_moment_bound(&spec, &ens, a, last, i)?, a));
                        }
                    }
                }
                "poly_moment" => {
                    let r = spec.constants.moment_exponent();
                    for &a in &bases {
                        reports.push(tag(check_poly_moment_bound(&spec, &ens, a, last, r)?, a));
                    }
                }
                "multiple_exp" => {
                    let s = ens.anchors[bases[0]].s;
                    let same: Vec<usize> = bases.iter().copied().filter(|&a| ens.anchors[a].s == s).collect();
                    let four = [0, 1, 2, 3].map(|k| same[k % same.len()]);
                    reports.push(check_multiple_exp_bound(&spec, &ens, four, last)?);
                }
                "gronwall" => {
                    let (a, b) = pair(&bases, id)?;
                    reports.extend(check_gronwall(&spec, &ens, a, b, cfg.gronwall)?);
                }
                "flow_holder" => {
                    let (a, b) = pair(&bases, id)?;
                    reports.push(check_flow_holder(
                        &spec,
                        &ens,
                        FlowPoint { anchor: a, rec: last },
                        FlowPoint { anchor: b, rec: last },
                    )?);
                }
                "derivative_moment" => {
                    let mut e1 = vec![0.0; spec.dim_state];
                    e1[0] = 1.0;
                    for &a in &bases {
                        let deriv = simulate_variational(&spec, &ens, a, &e1)?;
                        reports.push(tag(check_derivative_moment_bound(&spec, &deriv, last)?, a));
                    }
                }
                "kolmogorov" => {
                    let table = kolmogorov_table(&ens, &KolmogorovParams::new(spec.constants.moment_exponent()))?;
                    let mut buf = Vec::new();
                    table.write_csv(&mut buf)?;
                    kolmogorov_csv = Some(buf);
                    reports.push(table.report(ens.n_paths));
                }
                "gradient_assembly" => {
                    let dir = cfg.directions.first().ok_or_else(|| {
                        FlowError::Config("gradient_assembly needs a direction in [[grid.directions]]".into())
                    })?;
                    for &a in &bases {
                        let basis = (0..spec.dim_state)
                            .map(|i| {
                                let mut h = vec![0.0; spec.dim_state];
                                h[i] = 1.0;
                                simulate_variational(&spec, &ens, a, &h)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let g = gradient_assembly(&ens, a, &basis, &dir.v, &dir.y_values, last)?;
                        reports.push(g.report(cfg.gradient_tol, cfg.gradient_min_order));
                    }
                }
                other => unreachable!("check id {other} validated at resolve time"),
            }
        }
    }
    passed &= reports.iter().all(|r| r.satisfied);
    Ok(RunOutcome { condition_report, bound_reports: reports, kolmogorov_csv, passed })
}

fn method_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

/// One row per bound report with the scalar fields as 17-digit decimals.
pub fn bounds_csv(reports: &[BoundReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "index",
        "bound_id",
        "relation",
        "lhs",
        "ci_lo",
        "ci_hi",
        "ci_method",
        "rhs",
        "satisfied",
        "n_effective",
        "overflow",
    ])?;
    for (k, r) in reports.iter().enumerate() {
        w.write_record([
            k.to_string(),
            r.bound_id.clone(),
            method_name(&r.relation),
            sci17(r.lhs),
            sci17(r.ci_lo),
            sci17(r.ci_hi),
            method_name(&r.ci_method),
            sci17(r.rhs),
            r.satisfied.to_string(),
            r.n_effective.to_string(),
            r.overflow.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| FlowError::Io(e.into_error()))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ResolvedConfig,
    crate_version: String,
    threads: usize,
    started_unix_s: f64,
    wall_clock_s: f64,
    outputs: Vec<String>,
    passed: bool,
}

/// Loads the configuration echoed into a manifest.
pub fn config_from_manifest(path: &Path) -> Result<ResolvedConfig> {
    let text = fs::read_to_string(path)?;
    let m: Manifest = serde_json::from_str(&text)?;
    Ok(m.config)
}

/// Runs a resolved configuration and writes its artifacts.
pub fn run(cfg: &ResolvedConfig) -> Result<RunOutcome> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let clock = Instant::now();
    let outcome = execute(cfg)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir.join("tables"))
        .map_err(|e| FlowError::Config(format!("output directory {} not writable: {e}", dir.display())))?;
    let mut outputs = Vec::new();
    let mut put = |rel: &str, bytes: &[u8]| -> Result<()> {
        fs::write(dir.join(rel), bytes)?;
        outputs.push(rel.to_string());
        Ok(())
    };
    put("condition_report.json", outcome.condition_report.to_json()?.as_bytes())?;
    put("bound_reports.json", serde_json::to_string_pretty(&outcome.bound_reports)?.as_bytes())?;
    put("tables/bounds.csv", &bounds_csv(&outcome.bound_reports)?)?;
    if let Some(k) = &outcome.kolmogorov_csv {
        put("tables/kolmogorov.csv", k)?;
    }
    let manifest = Manifest {
        config: cfg.clone(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        threads: rayon::current_num_threads(),
        started_unix_s: started,
        wall_clock_s: clock.elapsed().as_secs_f64(),
        outputs,
        passed: outcome.passed,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(outcome)
}

/// Model equations, constants, certified box, oracle availability and frozen fit values.
pub fn describe(name: &str) -> Result<String> {
    let m: NamedModel = model_by_name(name)?;
    let c = &m.spec.constants;
    let mut s = String::new();
    let _ = writeln!(s, "model: {}", m.name);
    let _ = writeln!(s, "description: {}", m.description);
    let _ = writeln!(s, "dimensions: d = {}, m = {}", m.spec.dim_state, m.spec.dim_noise);
    let _ = writeln!(s, "equations:");
    for e in &m.equations {
        let _ = writeln!(s, "  {e}");
    }
    let _ = writeln!(s, "phi: {}", m.spec.phi.describe());
    let _ = writeln!(s, "constants:");
    let table = toml::to_string(c).map_err(|e| FlowError::Config(e.to_string()))?;
    for line in table.lines() {
        let _ = writeln!(s, "  {line}");
    }
    let _ = writeln!(s, "box: lo = {:?}, hi = {:?}", m.box_lo, m.box_hi);
    let _ = writeln!(s, "default start: {:?}", m.default_start);
    let _ = writeln!(s, "certified: {}", m.certified);
    let oracles = m.oracle.available();
    let _ = writeln!(s, "oracles: {}", if oracles.is_empty() { "none".to_string() } else { oracles.join(", ") });
    if let Some(f) = &m.fitted {
        let _ = writeln!(s, "fit_constants regression values:");
        for (k, v) in [
            ("c1_min", f.c1_min),
            ("c2_min", f.c2_min),
            ("c3_min", f.c3_min),
            ("alpha0_min", f.alpha0_min),
            ("beta0_min", f.beta0_min),
            ("alpha1_min", f.alpha1_min),
            ("beta1_min", f.beta1_min),
            ("phi_min", f.phi_min),
        ] {
            let _ = writeln!(s, "  {k} = {}", sci17(v));
        }
    }
    Ok(s)
}

pub fn list_checks() -> String {
    CHECK_IDS.iter().zip(CHECK_SUMMARIES).map(|(id, what)| format!("{id:<18} {what}\n")).collect()
}

pub fn list_models() -> String {
    MODEL_NAMES
        .iter()
        .map(|n| {
            let m = model_by_name(n).expect("registered model");
            format!("{n:<18} {}\n", m.description)
        })
        .collect()
}

#[derive(Parser, Debug)]
#[command(name = "flowlab", version, about = "Monte Carlo laboratory for SDE flows and their moment bounds")]
pub struct Cli {
    /// Worker threads for simulation and certification (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Certify, simulate and check bounds; writes reports to the output directory.
    Run(RunArgs),
    /// Print a built-in model's equations, constants and box.
    Describe { name: String },
    /// Certify a built-in model's hypotheses on a box and print the condition report.
    Certify(CertifyArgs),
    /// List the built-in models.
    ListModels,
    /// List the check ids accepted by `run`.
    ListChecks,
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Re-run the configuration echoed in a manifest.json.
    #[arg(long, conflicts_with_all = ["config", "model", "preset"])]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Comma-separated check ids.
    #[arg(long, value_delimiter = ',')]
    pub checks: Option<Vec<String>>,
    #[arg(long)]
    pub n_paths: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CertifyArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1024)]
    pub n_points: usize,
    #[arg(long, value_enum, default_value = "sobol")]
    pub sampler: SamplerArg,
    #[arg(long, default_value_t = 0.0)]
    pub tol_cert: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum SamplerArg {
    Sobol,
    Uniform,
    Grid,
}

impl From<SamplerArg> for Sampler {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Sobol => Sampler::Sobol,
            SamplerArg::Uniform => Sampler::Uniform,
            SamplerArg::Grid => Sampler::Grid,
        }
    }
}

fn resolve_run_args(args: &RunArgs) -> Result<ResolvedConfig> {
    if let Some(m) = &args.manifest {
        let mut cfg = config_from_manifest(m)?;
        if let Some(o) = &args.output_dir {
            cfg.output_dir = o.clone();
        }
        return Ok(cfg);
    }
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if args.model.is_some() {
        cfg.model = args.model.clone();
    }
    if args.preset.is_some() {
        cfg.preset = args.preset.clone();
    }
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if args.output_dir.is_some() {
        cfg.output_dir = args.output_dir.clone();
    }
    if args.checks.is_some() {
        cfg.checks = args.checks.clone();
    }
    if args.n_paths.is_some() {
        cfg.grid.n_paths = args.n_paths;
    }
    cfg.resolve()
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run(args) => {
            let cfg = resolve_run_args(&args)?;
            let outcome = run(&cfg)?;
            for r in &outcome.bound_reports {
                println!(
                    "{:<18} {} lhs={} rhs={}",
                    r.bound_id,
                    if r.satisfied { "satisfied" } else { "FALSIFIED" },
                    sci17(r.lhs),
                    sci17(r.rhs)
                );
            }
            if cfg.wants("certify") {
                println!("{:<18} {}", "certify", if outcome.condition_report.passed { "passed" } else { "FAILED" });
            }
            println!("outputs written to {}", cfg.output_dir.display());
            Ok(outcome.exit_code())
        }
        Command::Describe { name } => {
            print!("{}", describe(&name)?);
            Ok(EXIT_PASS)
        }
        Command::Certify(a) => {
            let nm = model_by_name(&a.model)?;
            let region = nm.region(a.n_points)?.with_sampler(a.sampler.into());
            region.validate(&nm.spec)?;
            let report = certify_with_tolerance(&nm.spec, &region, a.seed, a.tol_cert)?;
            let json = report.to_json()?;
            match &a.output {
                Some(p) => fs::write(p, json)?,
                None => println!("{json}"),
            }
            Ok(if report.passed { EXIT_PASS } else { EXIT_FALSIFIED })
        }
        Command::ListModels => {
            print!("{}", list_models());
            Ok(EXIT_PASS)
        }
        Command::ListChecks => {
            print!("{}", list_checks());
            Ok(EXIT_PASS)
        }
    }
}

/// Parses arguments, runs the verb and maps the outcome onto the exit-code contract.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_PASS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return EXIT_ERROR;
        }
    }
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke(seed: u64) -> ResolvedConfig {
        RunConfig {
            model: Some("ou".into()),
            seed: Some(seed),
            preset: Some("smoke".into()),
            ..RunConfig::default()
        }
        .resolve()
        .unwrap()
    }

    #[test]
    fn smoke_preset_defaults() {
        let c = smoke(7);
        assert_eq!(c.n_paths, 1000);
        assert_eq!(c.checks, vec!["lyapunov", "derivative_moment"]);
        assert_eq!(c.anchors, vec![Anchor::new(0.0, vec![1.0])]);
        assert_eq!(*c.record_times.last().unwrap(), 1.0);
        assert_eq!(c.record_times.len(), 32);
    }

    #[test]
    fn lyapunov_rate_absorbs_beta() {
        let ou = model_by_name("ou").unwrap().spec;
        assert_eq!(lyapunov_rate(&ou, LyapunovIndex::V0), (1.0, 1.0));
        let gl = model_by_name("ginzburg_landau").unwrap().spec;
        assert_eq!(lyapunov_rate(&gl, LyapunovIndex::V0), (3.0, 1.0 / 3.0));
        let gbm = model_by_name("gbm").unwrap().spec;
        assert_eq!(lyapunov_rate(&gbm, LyapunovIndex::V0), (0.0, 0.0));
    }

    #[test]
    fn smoke_run_passes_on_ou() {
        let out = execute(&smoke(7)).unwrap();
        assert!(out.passed, "{:?}", out.bound_reports);
        assert_eq!(out.exit_code(), EXIT_PASS);
    }

    #[test]
    fn unknown_check_lists_valid_ids() {
        let cfg = RunConfig {
            model: Some("ou".into()),
            seed: Some(1),
            checks: Some(vec!["nope".into()]),
            ..RunConfig::default()
        };
        let msg = cfg.resolve().unwrap_err().to_string();
        assert!(msg.contains("nope") && CHECK_IDS.iter().all(|id| msg.contains(id)), "{msg}");
    }

    #[test]
    fn missing_seed_is_an_error() {
        let cfg = RunConfig { model: Some("ou".into()), ..RunConfig::default() };
        assert!(cfg.resolve().unwrap_err().to_string().contains("seed"));
    }

    #[test]
    fn malformed_config_points_at_line_and_key() {
        let err = RunConfig::from_toml("model = \"ou\"\nseed = 3\n[grid]\ndt = \"fast\"\n").unwrap_err().to_string();
        assert!(err.contains("line 4") && err.contains("dt"), "{err}");
        let err = RunConfig::from_toml("model = \"ou\"\nsede = 3\n").unwrap_err().to_string();
        assert!(err.contains("sede"), "{err}");
    }

    #[test]
    fn toml_overrides_reach_the_model() {
        let cfg = RunConfig::from_toml(
            r#"
model = "ginzburg_landau"
seed = 5
checks = ["certify"]
[constants]
alpha0 = 4.0
q = "inf"
phi = 2.5
[region]
n_points = 64
[flags]
horizon = "remaining"
"#,
        )
        .unwrap()
        .resolve()
        .unwrap();
        let spec = cfg.model_spec().unwrap();
        assert_eq!(spec.constants.alpha0, 4.0);
        assert_eq!(spec.phi.eval(0.3), 2.5);
        assert_eq!(spec.flags.horizon, HorizonWeighting::Remaining);
        assert_eq!(cfg.region.n_points, 64);
    }

    #[test]
    fn resolved_config_roundtrips_through_json() {
        let c = smoke(3);
        let back: ResolvedConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn describe_shows_oracles_and_fit() {
        assert!(describe("ou").unwrap().contains("x e^{-(t-s)}"));
        let gl = describe("ginzburg_landau").unwrap();
        assert!(gl.contains("fit_constants regression values") && gl.contains("phi_min"));
        assert!(describe("nope").is_err());
    }

    #[test]
    fn bounds_csv_has_header_and_rows() {
        let out = execute(&smoke(2)).unwrap();
        let text = String::from_utf8(bounds_csv(&out.bound_reports).unwrap()).unwrap();
        assert_eq!(text.lines().count(), 1 + out.bound_reports.len());
        assert!(text.starts_with("index,bound_id,relation,lhs"));
    }
}
