//! Assembly of the flow increment from directional derivatives along a basis.

use serde::Serialize;

use crate::error::{FlowError, Result};
use crate::estimate::bounds::{BoundReport, CiMethod, Relation};
use crate::estimate::stats::{loglog_slope, tree_sum};
use crate::linalg::norm2_sq;
use crate::numfmt::{ser_f64, ser_vec};
use crate::sim::{DerivativeEnsemble, PathEnsemble};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientAssembly {
    pub anchor: usize,
    #[serde(serialize_with = "ser_vec")]
    pub direction: Vec<f64>,
    /// Perturbation sizes `‖v‖ = |y|·‖u‖`.
    #[serde(serialize_with = "ser_vec")]
    pub sizes: Vec<f64>,
    /// `L²(P)` residual for each size.
    #[serde(serialize_with = "ser_vec")]
    pub residuals: Vec<f64>,
    /// Fitted log–log order of residual against size; `∞` when every residual is at roundoff.
    #[serde(serialize_with = "ser_f64")]
    pub order: f64,
    pub n_effective: usize,
}

/// For `v = y·u` and each `y`, the `L²(P)` norm at record `rec` of
/// `X^{x+v} − X^x − Σ_i ⟨v, h_i⟩ D^{h_i}` where `basis[i]` holds the variational process
/// along the `i`-th coordinate vector `h_i`.
pub fn gradient_assembly(
    ens: &PathEnsemble,
    anchor: usize,
    basis: &[DerivativeEnsemble],
    u: &[f64],
    y_values: &[f64],
    rec: usize,
) -> Result<GradientAssembly> {
    let d = ens.dim_state;
    if basis.len() != d || basis.iter().any(|b| b.anchor != anchor || b.n_paths != ens.n_paths) {
        return Err(FlowError::Config(format!("need {d} basis derivatives for anchor {anchor}")));
    }
    for (i, b) in basis.iter().enumerate() {
        if b.v.iter().enumerate().any(|(j, vj)| *vj != if i == j { 1.0 } else { 0.0 }) {
            return Err(FlowError::Config(format!("basis derivative {i} is not along the coordinate vector")));
        }
    }
    if rec >= ens.n_record() || u.len() != d {
        return Err(FlowError::Config("record index or direction dimension out of range".into()));
    }
    let unorm = norm2_sq(u).sqrt();
    let mut sizes = Vec::new();
    let mut residuals = Vec::new();
    let mut n_effective = usize::MAX;
    for &y in y_values {
        let pert = ens
            .perturbed_index(anchor, u, y)
            .ok_or_else(|| FlowError::Config(format!("no perturbed anchor for y = {y}")))?;
        let mut sq = Vec::with_capacity(ens.n_paths);
        let mut r = vec![0.0; d];
        for p in 0..ens.n_paths {
            if !(ens.usable(p, anchor) && ens.usable(p, pert) && basis.iter().all(|b| b.usable(p))) {
                continue;
            }
            let (x0, x1) = (ens.state(p, anchor, rec), ens.state(p, pert, rec));
            for k in 0..d {
                r[k] = x1[k] - x0[k];
            }
            for (i, b) in basis.iter().enumerate() {
                let coeff = y * u[i];
                for (rk, dk) in r.iter_mut().zip(b.value(p, rec)) {
                    *rk -= coeff * dk;
                }
            }
            sq.push(norm2_sq(&r));
        }
        if sq.is_empty() {
            return Err(FlowError::EmptySample);
        }
        n_effective = n_effective.min(sq.len());
        sizes.push(y.abs() * unorm);
        residuals.push((tree_sum(&sq) / sq.len() as f64).sqrt());
    }
    let fit: Vec<usize> = (0..sizes.len()).filter(|&k| residuals[k] > 0.0).collect();
    let order = if fit.len() < 2 {
        f64::INFINITY
    } else {
        let xs: Vec<f64> = fit.iter().map(|&k| sizes[k]).collect();
        let ys: Vec<f64> = fit.iter().map(|&k| residuals[k]).collect();
        loglog_slope(&xs, &ys)
    };
    Ok(GradientAssembly { anchor, direction: u.to_vec(), sizes, residuals, order, n_effective })
}

impl GradientAssembly {
    /// Satisfied when every residual is below `tol·‖v‖` or the fitted order reaches `min_order`.
    pub fn report(&self, tol: f64, min_order: f64) -> BoundReport {
        let negligible = self.sizes.iter().zip(&self.residuals).all(|(s, r)| *r <= tol * s);
        let order = if negligible { f64::INFINITY } else { self.order };
        let mut r = BoundReport::new("gradient_assembly", order, (order, order), CiMethod::Exact, min_order, self.n_effective)
            .with_relation(Relation::Ge)
            .int("anchor", self.anchor)
            .vec("direction", &self.direction)
            .vec("sizes", &self.sizes)
            .vec("residuals", &self.residuals)
            .num("tol", tol);
        r.refresh();
        r
    }
}
