//! Deterministic reductions, empirical norms and confidence intervals.

use rayon::prelude::*;

use crate::error::{FlowError, Result};
use crate::linalg::norm2;
use crate::sim::rng::{keyed_rng, DOMAIN_BOOTSTRAP};
use rand_chacha::rand_core::RngCore;

/// Two-sided 99% standard normal quantile.
pub const Z99: f64 = 2.5758293035489004;
/// One-sided 99% standard normal quantile.
pub const Z99_ONE_SIDED: f64 = 2.3263478740408408;
pub const BOOTSTRAP_RESAMPLES: usize = 400;

const CHUNK: usize = 1024;

/// Sum with a fixed chunked tree: sequential within chunks of 1024, chunk sums
/// added left to right. The result does not depend on the thread count.
pub fn tree_sum(values: &[f64]) -> f64 {
    if values.len() <= CHUNK {
        return values.iter().sum();
    }
    let partial: Vec<f64> = values.par_chunks(CHUNK).map(|c| c.iter().sum::<f64>()).collect();
    partial.iter().sum()
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(FlowError::EmptySample);
    }
    Ok(tree_sum(values) / values.len() as f64)
}

/// Sample mean and unbiased sample variance.
pub fn mean_var(values: &[f64]) -> Result<(f64, f64)> {
    let m = mean(values)?;
    if values.len() < 2 {
        return Ok((m, 0.0));
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    Ok((m, tree_sum(&sq) / (values.len() - 1) as f64))
}

/// Standard error of the mean.
pub fn standard_error(values: &[f64]) -> Result<f64> {
    let (_, var) = mean_var(values)?;
    Ok((var / values.len() as f64).sqrt())
}

/// `(E‖X‖^r)^{1/r}` over the samples; `r = ∞` gives the maximum norm.
pub fn empirical_norm<S: AsRef<[f64]>>(samples: &[S], r: f64) -> Result<f64> {
    let norms: Vec<f64> = samples.iter().map(|s| norm2(s.as_ref())).collect();
    power_mean(&norms, r)
}

/// `(mean a_i^r)^{1/r}` for nonnegative scalars; maximum when `r = ∞`.
pub fn power_mean(values: &[f64], r: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(FlowError::EmptySample);
    }
    if !(r > 0.0) {
        return Err(FlowError::Config(format!("norm exponent must be positive, got {r}")));
    }
    if r.is_infinite() {
        return Ok(values.iter().copied().fold(0.0, f64::max));
    }
    let powered: Vec<f64> = values.iter().map(|a| pow_abs(*a, r)).collect();
    Ok(mean(&powered)?.powf(1.0 / r))
}

#[inline]
fn pow_abs(a: f64, r: f64) -> f64 {
    if r == 2.0 {
        a * a
    } else {
        a.abs().powf(r)
    }
}

/// Power mean with a 99% CLT interval: the interval for `E a^r` is mapped through `^{1/r}`.
pub fn power_mean_clt(values: &[f64], r: f64) -> Result<(f64, f64, f64)> {
    if r.is_infinite() {
        let m = power_mean(values, r)?;
        return Ok((m, m, m));
    }
    if values.is_empty() {
        return Err(FlowError::EmptySample);
    }
    let powered: Vec<f64> = values.iter().map(|a| pow_abs(*a, r)).collect();
    let (m, var) = mean_var(&powered)?;
    let half = Z99 * (var / powered.len() as f64).sqrt();
    let inv = 1.0 / r;
    Ok((m.powf(inv), (m - half).max(0.0).powf(inv), (m + half).powf(inv)))
}

/// `ln( mean exp(ℓ_i) )` computed stably.
pub fn log_mean_exp(logs: &[f64]) -> Result<f64> {
    if logs.is_empty() {
        return Err(FlowError::EmptySample);
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Ok(max);
    }
    let shifted: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    Ok(max + (tree_sum(&shifted) / logs.len() as f64).ln())
}

/// Index draw in `0..n` from a 64-bit word (multiply-shift).
#[inline]
fn index_below(u: u64, n: usize) -> usize {
    ((u as u128 * n as u128) >> 64) as usize
}

/// Statistic evaluated on 400 resamples with replacement, each drawn from its own
/// keyed stream. Returns the sorted replicate values.
pub fn bootstrap_replicates<F>(n: usize, seed: u64, stat: F) -> Vec<f64>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    let mut reps: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .into_par_iter()
        .map(|b| {
            let mut rng = keyed_rng(seed, DOMAIN_BOOTSTRAP, b as u64);
            let idx: Vec<usize> = (0..n).map(|_| index_below(rng.next_u64(), n)).collect();
            stat(&idx)
        })
        .collect();
    reps.sort_by(f64::total_cmp);
    reps
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Two-sided 99% percentile interval of `ln mean exp(ℓ)`.
pub fn bootstrap_log_mean_exp(logs: &[f64], seed: u64) -> Result<(f64, f64)> {
    if logs.is_empty() {
        return Err(FlowError::EmptySample);
    }
    let reps = bootstrap_replicates(logs.len(), seed, |idx| {
        let sample: Vec<f64> = idx.iter().map(|&i| logs[i]).collect();
        log_mean_exp(&sample).unwrap_or(f64::NAN)
    });
    Ok((quantile_sorted(&reps, 0.005), quantile_sorted(&reps, 0.995)))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// `∫_a^b e^{−αr} dr`, stable for small `α(b − a)`.
pub fn exp_integral(alpha: f64, a: f64, b: f64) -> f64 {
    let len = b - a;
    if alpha == 0.0 {
        return len;
    }
    (-alpha * a).exp() * -(-alpha * len).exp_m1() / alpha
}

/// `∫_s^{s+L} (1 − (r−s)/L) e^{−αr} dr`.
pub fn ramp_exp_integral(alpha: f64, s: f64, len: f64) -> f64 {
    if len <= 0.0 {
        return 0.0;
    }
    let z = alpha * len;
    let core = if z.abs() < 1e-4 {
        len * (0.5 - z / 6.0 + z * z / 24.0)
    } else {
        // (1/α)[1 − (1 − e^{−z})/z]
        (1.0 + (-z).exp_m1() / z) / alpha
    };
    (-alpha * s).exp() * core
}
