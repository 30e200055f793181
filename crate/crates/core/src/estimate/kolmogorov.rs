//! Hölder quotients of the field `(s, t, x) ↦ X^x_{s,t}` over an anchor lattice.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::estimate::bounds::{BoundReport, CiMethod};
use crate::estimate::stats::tree_sum;
use crate::linalg::{norm2, norm2_sq};
use crate::numfmt::{ser_f64, ser_vec};
use crate::sim::PathEnsemble;

/// A lattice point: anchor `(s, x)` observed at record time index `rec`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticePoint {
    pub anchor: usize,
    pub rec: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KolmogorovParams {
    /// Moment exponent of the quotient numerator.
    pub exponent: f64,
    /// Hölder exponent applied to `|s₁−s₂|` and `|t₁−t₂|`.
    pub alpha_time: f64,
    /// Hölder exponent applied to `‖x₁−x₂‖`.
    pub alpha_space: f64,
    pub radii: Vec<f64>,
}

impl KolmogorovParams {
    pub fn new(exponent: f64) -> Self {
        Self { exponent, alpha_time: 0.5, alpha_space: 1.0, radii: vec![1.0, 2.0, 4.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairQuotient {
    pub a: usize,
    pub b: usize,
    #[serde(serialize_with = "ser_f64")]
    pub moment: f64,
    #[serde(serialize_with = "ser_f64")]
    pub distance: f64,
    #[serde(serialize_with = "ser_f64")]
    pub quotient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BallSummary {
    #[serde(serialize_with = "ser_f64")]
    pub radius: f64,
    pub n_points: usize,
    pub n_pairs: usize,
    #[serde(serialize_with = "ser_f64")]
    pub sup_quotient: f64,
    pub argsup: Option<(LatticePoint, LatticePoint)>,
    #[serde(serialize_with = "ser_f64")]
    pub sup_moment: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KolmogorovTable {
    pub params: KolmogorovParams,
    pub points: Vec<LatticePoint>,
    #[serde(serialize_with = "ser_vec")]
    pub point_s: Vec<f64>,
    #[serde(serialize_with = "ser_vec")]
    pub point_t: Vec<f64>,
    pub point_x: Vec<Vec<f64>>,
    pub pairs: Vec<PairQuotient>,
    pub balls: Vec<BallSummary>,
}

/// All lattice points `(anchor, rec)` with `t ≥ s`.
pub fn lattice_points(ens: &PathEnsemble) -> Vec<LatticePoint> {
    let mut out = Vec::new();
    for (anchor, a) in ens.anchors.iter().enumerate() {
        for (rec, &t) in ens.record_times.iter().enumerate() {
            if t >= a.s {
                out.push(LatticePoint { anchor, rec });
            }
        }
    }
    out
}

/// `(E‖X_a − X_b‖^r)^{1/r}` over paths usable for both anchors.
fn pair_moment(ens: &PathEnsemble, a: LatticePoint, b: LatticePoint, r: f64) -> Result<f64> {
    let mut vals = Vec::with_capacity(ens.n_paths);
    for p in 0..ens.n_paths {
        if !(ens.usable(p, a.anchor) && ens.usable(p, b.anchor)) {
            continue;
        }
        let (xa, xb) = (ens.state(p, a.anchor, a.rec), ens.state(p, b.anchor, b.rec));
        let sq: f64 = xa.iter().zip(xb).map(|(u, v)| (u - v) * (u - v)).sum();
        vals.push(if r == 2.0 { sq } else { sq.sqrt().powf(r) });
    }
    if vals.is_empty() {
        return Err(FlowError::EmptySample);
    }
    if r.is_infinite() {
        return Ok(vals.iter().copied().fold(0.0, f64::max));
    }
    Ok((tree_sum(&vals) / vals.len() as f64).powf(1.0 / r))
}

/// Quotients for every pair of lattice points, summarised per ball `‖x‖ ≤ n`.
pub fn kolmogorov_table(ens: &PathEnsemble, params: &KolmogorovParams) -> Result<KolmogorovTable> {
    if !(params.exponent > 0.0) || !(params.alpha_time > 0.0) || !(params.alpha_space > 0.0) {
        return Err(FlowError::Config("kolmogorov exponents must be positive".into()));
    }
    let points = lattice_points(ens);
    if points.len() < 2 {
        return Err(FlowError::Config("kolmogorov table needs at least two lattice points".into()));
    }
    let point_s: Vec<f64> = points.iter().map(|p| ens.anchors[p.anchor].s).collect();
    let point_t: Vec<f64> = points.iter().map(|p| ens.record_times[p.rec]).collect();
    let point_x: Vec<Vec<f64>> = points.iter().map(|p| ens.anchors[p.anchor].x.clone()).collect();
    let index_pairs: Vec<(usize, usize)> =
        (0..points.len()).flat_map(|i| (i + 1..points.len()).map(move |j| (i, j))).collect();
    let pairs = index_pairs
        .par_iter()
        .map(|&(i, j)| {
            let moment = pair_moment(ens, points[i], points[j], params.exponent)?;
            let dx = norm2_sq(&point_x[i].iter().zip(&point_x[j]).map(|(u, v)| u - v).collect::<Vec<_>>()).sqrt();
            let distance = (point_s[i] - point_s[j]).abs().powf(params.alpha_time)
                + (point_t[i] - point_t[j]).abs().powf(params.alpha_time)
                + dx.powf(params.alpha_space);
            Ok(PairQuotient { a: i, b: j, moment, distance, quotient: moment / distance })
        })
        .collect::<Result<Vec<_>>>()?;
    let balls = params
        .radii
        .iter()
        .map(|&radius| {
            let inside: Vec<bool> = point_x.iter().map(|x| norm2(x) <= radius).collect();
            let mut summary = BallSummary {
                radius,
                n_points: inside.iter().filter(|b| **b).count(),
                n_pairs: 0,
                sup_quotient: 0.0,
                argsup: None,
                sup_moment: 0.0,
            };
            for pq in pairs.iter().filter(|pq| inside[pq.a] && inside[pq.b]) {
                summary.n_pairs += 1;
                summary.sup_moment = summary.sup_moment.max(pq.moment);
                if summary.argsup.is_none() || pq.quotient > summary.sup_quotient {
                    summary.sup_quotient = pq.quotient;
                    summary.argsup = Some((points[pq.a], points[pq.b]));
                }
            }
            summary
        })
        .collect();
    Ok(KolmogorovTable { params: params.clone(), points, point_s, point_t, point_x, pairs, balls })
}

impl KolmogorovTable {
    /// Supremum over the largest ball.
    pub fn sup_quotient(&self) -> f64 {
        self.balls.iter().map(|b| b.sup_quotient).fold(0.0, f64::max)
    }

    /// One row per pair: both lattice points, the moment, the distance and the quotient.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let d = self.point_x.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["s1".to_string(), "t1".into()];
        header.extend((0..d).map(|i| format!("x1_{i}")));
        header.extend(["s2".to_string(), "t2".into()]);
        header.extend((0..d).map(|i| format!("x2_{i}")));
        header.extend(["moment".to_string(), "distance".into(), "quotient".into()]);
        w.write_record(&header)?;
        for pq in &self.pairs {
            let mut row = vec![self.point_s[pq.a].to_string(), self.point_t[pq.a].to_string()];
            row.extend(self.point_x[pq.a].iter().map(f64::to_string));
            row.extend([self.point_s[pq.b].to_string(), self.point_t[pq.b].to_string()]);
            row.extend(self.point_x[pq.b].iter().map(f64::to_string));
            row.extend([pq.moment.to_string(), pq.distance.to_string(), pq.quotient.to_string()]);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Finiteness of the supremum, reported against `rhs = ∞`.
    pub fn report(&self, n_paths: usize) -> BoundReport {
        let sup = self.sup_quotient();
        let mut r = BoundReport::new("kolmogorov", sup, (sup, sup), CiMethod::Max, f64::INFINITY, n_paths)
            .num("exponent", self.params.exponent)
            .num("alpha_time", self.params.alpha_time)
            .num("alpha_space", self.params.alpha_space)
            .int("n_points", self.points.len());
        for b in &self.balls {
            r = r.num(&format!("sup_quotient_r{}", b.radius), b.sup_quotient);
        }
        r.satisfied = sup.is_finite();
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::sim::{simulate_flow, Anchor, FlowGrid, Scheme};

    fn linear(rate: f64, sigma: f64) -> ModelSpec {
        ModelSpec::builder("lin", 1, 1, 1.0)
            .drift(move |x, o| o[0] = -rate * x[0])
            .drift_jacobian(move |_, o| o[0] = -rate)
            .diffusion(move |_, o| o[0] = sigma)
            .diffusion_jacobian(|_, o| o[0] = 0.0)
            .build()
            .unwrap()
    }

    #[test]
    fn constant_field_has_zero_quotients() {
        let m = linear(0.0, 0.0);
        let anchors = vec![Anchor::new(0.0, vec![0.5]), Anchor::new(0.5, vec![0.5])];
        let g = FlowGrid::new(anchors, 0.125, 4, vec![0.5, 1.0]).with_scheme(Scheme::EulerMaruyama);
        let e = simulate_flow(&m, &g, 1).unwrap();
        let t = kolmogorov_table(&e, &KolmogorovParams::new(2.0)).unwrap();
        assert_eq!(t.points.len(), 4);
        assert_eq!(t.pairs.len(), 6);
        assert!(t.pairs.iter().all(|p| p.quotient == 0.0));
        assert!(t.report(4).satisfied);
    }

    #[test]
    fn deterministic_decay_quotient_in_space() {
        // no noise: X = x(1−Δt)^n, so pairs at equal (s, t) give quotient (1−Δt)^n
        let m = linear(1.0, 0.0);
        let dt = 1.0 / 64.0;
        let anchors = vec![Anchor::new(0.0, vec![-0.5]), Anchor::new(0.0, vec![0.25])];
        let g = FlowGrid::new(anchors, dt, 3, vec![1.0]).with_scheme(Scheme::EulerMaruyama);
        let e = simulate_flow(&m, &g, 1).unwrap();
        let t = kolmogorov_table(&e, &KolmogorovParams::new(2.0)).unwrap();
        assert_eq!(t.pairs.len(), 1);
        assert!((t.pairs[0].quotient - (1.0 - dt).powi(64)).abs() < 1e-14);
        assert_eq!(t.balls[0].n_pairs, 1);
    }

    #[test]
    fn radius_filter_excludes_far_points() {
        let m = linear(0.0, 0.0);
        let anchors = vec![Anchor::new(0.0, vec![0.5]), Anchor::new(0.0, vec![3.0])];
        let g = FlowGrid::new(anchors, 0.5, 2, vec![1.0]);
        let e = simulate_flow(&m, &g, 1).unwrap();
        let t = kolmogorov_table(&e, &KolmogorovParams::new(2.0)).unwrap();
        assert_eq!(t.balls[0].n_pairs, 0);
        assert_eq!(t.balls[2].n_pairs, 1);
        assert_eq!(t.balls[2].sup_quotient, 1.0);
    }
}
